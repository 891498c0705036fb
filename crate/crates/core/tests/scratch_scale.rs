//! Temporary diagnostic for scale-model training (removed before release).

use equidyn::dynamics::{build_dataset, generate_corpus, Boundary, CorpusConfig, InitFamily};
use equidyn::layers::Symmetry;
use equidyn::models::{build, Arch, ModelSpec, TrainConfig, Trainer};

#[test]
#[ignore]
fn scale_training_diagnostic() {
    let corpus = generate_corpus(&CorpusConfig {
        n_traj: 4,
        grid: 32,
        frames: 49,
        substeps: 4,
        alpha_min: 0.5,
        alpha_max: 5.0,
        init: InitFamily::AnisotropicBumps,
        boundary: Boundary::Periodic,
        seed: 900,
    })
    .unwrap();
    let data = build_dataset(&corpus, 4, 5, 1, 0).unwrap();

    for sym in [Symmetry::None, Symmetry::Scale] {
        let mut spec = ModelSpec::new(Arch::ShallowCnn, sym);
        spec.width = 8;
        spec.depth = 3;
        spec.input_frames = 4;
        spec.grid = 32;
        spec.channels = 1;
        if sym == Symmetry::Scale && std::env::var("SINGLE_SLICE").is_ok() {
            spec.scale_grid = vec![1.0];
        }
        let mut tr = Trainer::new(build(&spec, 11).unwrap());
        for lr in [3e-3] {
            let cfg = TrainConfig { lr, k_accum: 2, epochs: 15, batch: 8, seed: 11 };
            let t0 = std::time::Instant::now();
            let stats = tr.train(data.train(), data.val(), &cfg).unwrap();
            for s in stats.iter().step_by(3) {
                eprintln!("  {:?} epoch {}: train {:.4e} val {:.4e}", sym, s.epoch, s.train_loss, s.val_loss);
            }
            eprintln!("  {:?} last: train {:.4e} val {:.4e} ({:.1}s)", sym, stats.last().unwrap().train_loss, stats.last().unwrap().val_loss, t0.elapsed().as_secs_f64());
        }
    }
}
