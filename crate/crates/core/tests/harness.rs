use speccond::bounds::conditioning_trajectory;
use speccond::conditioning::Conditioning;
use speccond::harness::{ablate_lambda, synth_task, train, OptimizerConfig, RunSpec, TrainRun, TransformerConfig};

fn small(conditioning: Conditioning) -> RunSpec {
    RunSpec {
        config: TransformerConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_head: 4,
            seq_len: 6,
            ffn_width: 8,
            layer_norm: true,
            feedforward: true,
            conditioning,
            seed: 11,
        },
        optimizer: OptimizerConfig::default(),
        steps: 20,
        batch_size: 8,
        probe_every: 10,
        probe_batch: 2,
        n_train: 128,
        n_eval: 32,
    }
}

#[test]
fn corrections_stay_frozen_in_every_mode() {
    for mode in [
        Conditioning::SvdCap,
        Conditioning::DiagonalShift { lambda: 10.0 },
        Conditioning::Off,
    ] {
        let run = train(TrainRun::new(small(mode))).unwrap();
        let out = run.outcome.unwrap();
        assert!(out.corrections_frozen(), "{mode}");
        assert_eq!(out.optimizer_tensors, out.parameter_tensors);
        assert_eq!(out.optimizer_entries, out.trainable_parameters);
        if mode == Conditioning::Off {
            assert!(out.corrections_initial.is_empty());
        }
    }
}

#[test]
fn shift_lowers_corrected_kappa_at_init() {
    let run = train(TrainRun::new(small(Conditioning::DiagonalShift { lambda: 10.0 }))).unwrap();
    let p = run.metrics[0].spectral.as_ref().unwrap();
    for r in 0..3 {
        assert!(p.corrected[r].kappa < p.weights[r].kappa);
    }
}

#[test]
fn larger_shift_conditions_better_at_every_probe() {
    let table = ablate_lambda(&small(Conditioning::Off), &[2.0, 10.0]).unwrap();
    let (low, high) = (&table.runs[0], &table.runs[1]);
    assert_eq!(
        low.snapshots[0].heads.iter().map(|h| &h.weights).collect::<Vec<_>>(),
        high.snapshots[0].heads.iter().map(|h| &h.weights).collect::<Vec<_>>()
    );
    for (a, b) in low.metrics.iter().zip(&high.metrics) {
        let (a, b) = (a.spectral.as_ref().unwrap(), b.spectral.as_ref().unwrap());
        for r in 0..3 {
            assert!(b.corrected[r].kappa < a.corrected[r].kappa, "step {} role {r}", a.step);
        }
    }
    assert!(table.rows[1].final_kappa_corrected < table.rows[0].final_kappa_corrected);
}

#[test]
fn trajectory_matches_logged_rows() {
    let run = train(TrainRun::new(small(Conditioning::SvdCap))).unwrap();
    let traj = conditioning_trajectory(&run.snapshots).unwrap();
    let logged: Vec<_> = run.metrics.iter().filter_map(|m| m.spectral.clone()).collect();
    assert_eq!(traj, logged);
    assert!(conditioning_trajectory(&[]).is_err());
}

#[test]
fn same_seed_same_data() {
    let a = synth_task(3, 64, 16);
    let b = synth_task(3, 64, 16);
    assert_eq!(a.train, b.train);
    assert_eq!(a.eval, b.eval);
    assert_ne!(a.train, synth_task(4, 64, 16).train);
}

#[test]
fn training_reduces_loss() {
    let mut spec = small(Conditioning::DiagonalShift { lambda: 10.0 });
    spec.steps = 150;
    spec.probe_every = 150;
    spec.optimizer.lr = 3e-3;
    let run = train(TrainRun::new(spec)).unwrap();
    let first = &run.metrics[0];
    let last = run.final_row().unwrap();
    assert!(last.eval_loss < first.eval_loss);
}
