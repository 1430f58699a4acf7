//! Desk-scale end-to-end training behaviour: meta-training on a seeded
//! oscillatory family makes measurable progress on the outer loss.

mod common;

use metacv::estimators::TaskDataset;
use metacv::network::{Activation, NetworkSpec, OutputMode};
use metacv::seeds;
use metacv::stein::SteinCV;
use metacv::task_environments::{sample_oscillatory_tasks, OscillatoryEnvironment, TaskKind};
use metacv::training::{meta_train, EtaSchedule, GradMode, MetaConfig, RuleKind};

#[test]
fn meta_training_reduces_the_smoothed_outer_loss() {
    let d = 1;
    let tasks = sample_oscillatory_tasks(
        OscillatoryEnvironment { d },
        500,
        10,
        90210,
        seeds::STREAM_TRAIN_TASKS,
    )
    .unwrap();
    let datasets: Vec<TaskDataset> = tasks.into_iter().map(|t| t.dataset).collect();
    let spec = NetworkSpec {
        input_dim: d,
        hidden: vec![16, 16],
        activation: Activation::Sigmoid,
        output_mode: OutputMode::ReplicateScalar,
    };
    let kind = TaskKind::Oscillatory;
    let cv = SteinCV::new(spec.clone(), kind.boundary(), kind.score(d)).unwrap();
    let cvs = vec![cv; datasets.len()];
    let config = MetaConfig {
        inner_steps: 1,
        inner_alpha: 0.01,
        eta: EtaSchedule::Constant(0.002),
        batch: 5,
        iterations: 500,
        lambda: 5e-6,
        grad_mode: GradMode::FirstOrder,
        inner_rule: RuleKind::Adam,
        outer_rule: RuleKind::Adam,
        sigma_init: 0.1,
        seed: 90210,
    };
    let result = meta_train(&cvs, &datasets, &spec, &config, |_, _| {}).unwrap();
    assert_eq!(result.trace.len(), 500);

    // Decile means smooth out the per-batch noise.
    let losses: Vec<f64> = result.trace.iter().map(|r| r.mean_outer_loss).collect();
    let decile = losses.len() / 10;
    let first: f64 = losses[..decile].iter().sum::<f64>() / decile as f64;
    let last: f64 = losses[losses.len() - decile..].iter().sum::<f64>() / decile as f64;
    assert!(
        last < first,
        "smoothed outer loss should fall over training: first decile {first:.4}, last {last:.4}"
    );
    result.params.check_finite().unwrap();
}
