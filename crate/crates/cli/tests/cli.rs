//! End-to-end runs of the equidyn binary: generation determinism, training,
//! resume, evaluation schema, verification outcomes and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_equidyn"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn gen_config(out: &Path) -> String {
    format!(
        "n_traj=2\ngrid=16\nframes=29\nsubsteps=2\nalpha_min=1.0\nalpha_max=2.0\n\
         init=gaussian_bumps\nboundary=periodic\nseed=5\nout={}\n",
        out.display()
    )
}

#[test]
fn generate_is_deterministic_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    let out1 = dir.path().join("d1");
    let out2 = dir.path().join("d2");
    write(&cfg, &gen_config(&out1));

    let status = bin().args(["generate", "--config"]).arg(&cfg).status().unwrap();
    assert!(status.success());
    // same config, different directory: identical bytes
    let status = bin().args(["generate", "--config"]).arg(&cfg).arg("--out").arg(&out2).status().unwrap();
    assert!(status.success());
    for name in ["traj_0000.eqdy", "traj_0001.eqdy", "provenance.json"] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let mut b = std::fs::read(out2.join(name)).unwrap();
        if name == "provenance.json" {
            // identical apart from nothing: provenance embeds no paths
            assert_eq!(a, b);
        } else {
            assert_eq!(a, b, "{} differs", name);
        }
        b.clear();
    }

    // rerunning without --force must fail with a config error (exit 2)
    let status = bin().args(["generate", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin().args(["generate", "--config"]).arg(&cfg).arg("--force").status().unwrap();
    assert!(status.success());

    // threads do not change the output
    let out3 = dir.path().join("d3");
    let status = bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out3)
        .args(["--threads", "4"])
        .status()
        .unwrap();
    assert!(status.success());
    let a = std::fs::read(out1.join("traj_0001.eqdy")).unwrap();
    let b = std::fs::read(out3.join("traj_0001.eqdy")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_trajectories_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    write(&cfg, &format!("n_traj=0\nout={}\n", dir.path().join("d").display()));
    let out = bin().args(["generate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d").join("traj_0000.eqdy").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "definitely_not_a_key=1\n");
    let out = bin().args(["generate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown config key"), "{}", stderr);
}

fn train_config(data: &Path, out: &Path, epochs: usize) -> String {
    format!(
        "arch=shallow_cnn\nsymmetry=mag\ndepth=2\nwidth=4\nl=3\ngrid=16\nkernel=3\n\
         horizon=3\nk_accum=2\nlr=1e-3\nepochs={}\nbatch=4\nseed=11\ndata={}\nout={}\n",
        epochs,
        data.display(),
        out.display()
    )
}

#[test]
fn train_eval_verify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = dir.path().join("gen.cfg");
    let data = dir.path().join("data");
    write(&gen_cfg, &gen_config(&data));
    assert!(bin().args(["generate", "--config"]).arg(&gen_cfg).status().unwrap().success());

    // epochs=0 leaves the checkpoint at its initialization
    let run0 = dir.path().join("run0");
    let cfg0 = dir.path().join("t0.cfg");
    write(&cfg0, &train_config(&data, &run0, 0));
    assert!(bin().args(["train", "--config"]).arg(&cfg0).status().unwrap().success());
    assert!(run0.join("checkpoint.eqdm").exists());
    let loss0 = std::fs::read_to_string(run0.join("loss.csv")).unwrap();
    assert_eq!(loss0.trim(), "epoch,train_loss,val_loss");

    // real training emits one loss row per epoch
    let run1 = dir.path().join("run1");
    let cfg1 = dir.path().join("t1.cfg");
    write(&cfg1, &train_config(&data, &run1, 2));
    assert!(bin().args(["train", "--config"]).arg(&cfg1).status().unwrap().success());
    let loss1 = std::fs::read_to_string(run1.join("loss.csv")).unwrap();
    assert_eq!(loss1.lines().count(), 3);
    assert!(loss1.starts_with("epoch,train_loss,val_loss\n"));

    // resume for two more epochs matches a straight four-epoch run
    let run2 = dir.path().join("run2");
    let cfg2 = dir.path().join("t2.cfg");
    write(
        &cfg2,
        &format!("{}resume={}\n", train_config(&data, &run2, 2), run1.join("checkpoint.eqdm").display()),
    );
    assert!(bin().args(["train", "--config"]).arg(&cfg2).status().unwrap().success());
    let run4 = dir.path().join("run4");
    let cfg4 = dir.path().join("t4.cfg");
    write(&cfg4, &train_config(&data, &run4, 4));
    assert!(bin().args(["train", "--config"]).arg(&cfg4).status().unwrap().success());
    let resumed = std::fs::read(run2.join("checkpoint.eqdm")).unwrap();
    let straight = std::fs::read(run4.join("checkpoint.eqdm")).unwrap();
    assert_eq!(resumed, straight, "resume is not bit-identical");

    // eval: schema and reproducibility
    let eval_out = dir.path().join("eval1");
    let ecfg = dir.path().join("e.cfg");
    write(
        &ecfg,
        &format!(
            "checkpoint={}\ndata={}\nhorizon=3\ntransforms=orig,Mag,Rot,Scale\nseed=3\nout={}\n",
            run1.join("checkpoint.eqdm").display(),
            data.display(),
            eval_out.display()
        ),
    );
    assert!(bin().args(["eval", "--config"]).arg(&ecfg).status().unwrap().success());
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,split,transform,step,value,seed\n"));
    for t in ["orig", "Mag", "Rot", "Scale"] {
        for step in 1..=3 {
            assert!(
                metrics.contains(&format!("rmse,test,{},{},", t, step)),
                "missing rmse row for {} step {}:\n{}",
                t,
                step,
                metrics
            );
        }
        assert!(metrics.contains(&format!("ese,test,{},3,", t)));
        assert!(metrics.contains(&format!("thermal_energy_l1,test,{},3,", t)));
    }
    // byte-identical on a second run
    let eval_out2 = dir.path().join("eval2");
    assert!(bin()
        .args(["eval", "--config"])
        .arg(&ecfg)
        .arg("--out")
        .arg(&eval_out2)
        .status()
        .unwrap()
        .success());
    assert_eq!(
        std::fs::read(eval_out.join("metrics.csv")).unwrap(),
        std::fs::read(eval_out2.join("metrics.csv")).unwrap()
    );

    // verify: the magnitude model passes a tight tolerance...
    let vcfg = dir.path().join("v.cfg");
    write(
        &vcfg,
        &format!(
            "checkpoint={}\nn_samples=5\ntolerance=1e-8\nseed=2\n",
            run1.join("checkpoint.eqdm").display()
        ),
    );
    let out = bin().args(["verify", "--config"]).arg(&vcfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    // ...and fails against rotations, with the max EE reported (exit 4)
    let vcfg2 = dir.path().join("v2.cfg");
    write(
        &vcfg2,
        &format!(
            "checkpoint={}\nn_samples=5\ntolerance=1e-8\ntransforms=Rot\nseed=2\n",
            run1.join("checkpoint.eqdm").display()
        ),
    );
    let out = bin().args(["verify", "--config"]).arg(&vcfg2).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max equivariance error"));

    // n_samples=0 is a config error
    let vcfg3 = dir.path().join("v3.cfg");
    write(
        &vcfg3,
        &format!(
            "checkpoint={}\nn_samples=0\ntolerance=1e-8\n",
            run1.join("checkpoint.eqdm").display()
        ),
    );
    let out = bin().args(["verify", "--config"]).arg(&vcfg3).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
