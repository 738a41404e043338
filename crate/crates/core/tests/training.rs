use adasparse::attention::HeadNormalizerConfig;
use adasparse::train::{gen_task, gradcheck_model, train, GradcheckScope, RunStatus, SyntheticTask, TrainerConfig};

fn tiny_task(seed: u64) -> SyntheticTask {
    SyntheticTask {
        vocab_size: 5,
        output_len: 3,
        upsample: 2,
        samples: 4,
        seed,
        frame_dim: 8,
    }
}

#[test]
fn model_gradient_matches_finite_differences_in_linear_layers() {
    let cfg = TrainerConfig {
        seed: 4,
        ..TrainerConfig::default()
    };
    let r = gradcheck_model(&cfg, &tiny_task(3), 1e-6, GradcheckScope::LinearOnly).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_err <= 1e-7, "{:?}", r.per_tensor);
}

#[test]
fn model_gradient_matches_finite_differences_everywhere() {
    let heads = vec![
        vec![
            HeadNormalizerConfig::Softmax,
            HeadNormalizerConfig::EntmaxAdaptive { pre: 0.0 },
        ],
        vec![
            HeadNormalizerConfig::Sparsemax,
            HeadNormalizerConfig::EntmaxFixed { alpha: 1.5 },
        ],
    ];
    for (k, encoder_heads) in heads.into_iter().enumerate() {
        for lambda in [0.0, 0.01] {
            let cfg = TrainerConfig {
                seed: 4 + k as u64,
                lambda,
                head_layers: Some(vec![0, 1]),
                encoder_heads: encoder_heads.clone(),
                ..TrainerConfig::default()
            };
            let r = gradcheck_model(&cfg, &tiny_task(3 + k as u64), 1e-6, GradcheckScope::Full).unwrap();
            assert!(r.checked > 100);
            assert!(r.max_rel_err <= 1e-4, "lambda {lambda}: {:?}", r.per_tensor);
            // every parameter tensor took part
            for tensor in [
                "enc.pos",
                "dec.embed",
                "dec.pos",
                "dec.end_frame",
                "dec.wo",
                "out.w",
                "out.b",
            ] {
                assert!(r.per_tensor.contains_key(tensor), "{tensor} missing");
            }
        }
    }
}

fn small_config(seed: u64) -> (TrainerConfig, SyntheticTask) {
    let task = SyntheticTask {
        samples: 200,
        ..SyntheticTask::copy_task(seed)
    };
    let cfg = TrainerConfig {
        steps: 60,
        batch_size: 8,
        log_every: 20,
        seed,
        ..TrainerConfig::default()
    };
    (cfg, task)
}

#[test]
fn training_is_bit_deterministic() {
    let (cfg, task) = small_config(2);
    let a = train(&cfg, &task).unwrap();
    let b = train(&cfg, &task).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model, b.model);
    let (cfg, task) = small_config(3);
    let c = train(&cfg, &task).unwrap();
    assert_ne!(a.trace.rows, c.trace.rows);
}

#[test]
fn alpha_stays_strictly_between_one_and_two() {
    let (mut cfg, task) = small_config(5);
    cfg.log_every = 1;
    cfg.learning_rate = 0.05;
    let run = train(&cfg, &task).unwrap();
    assert_eq!(run.trace.status, RunStatus::Converged);
    assert_eq!(run.trace.rows.len(), 61);
    for row in &run.trace.rows {
        for &a in &row.alphas {
            assert!(a > 1.0 && a < 2.0, "step {}: alpha {a}", row.step);
        }
    }
}

#[test]
fn short_run_reduces_the_loss() {
    let (mut cfg, task) = small_config(1);
    cfg.steps = 300;
    cfg.log_every = 100;
    let run = train(&cfg, &task).unwrap();
    let first = run.trace.rows.first().unwrap().loss;
    let last = run.trace.rows.last().unwrap().loss;
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn held_out_split_is_disjoint_from_training() {
    let data = gen_task(&SyntheticTask::copy_task(0)).unwrap();
    let (train_part, eval_part) = data.split();
    assert_eq!(train_part.len() + eval_part.len(), 2000);
    assert_eq!(eval_part.len(), 200);
}
