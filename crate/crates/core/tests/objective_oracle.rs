//! The full loss evaluated by straight-line arithmetic on the generated
//! images, without the graph.

use noisediv::diversity::DiversityMetric;
use noisediv::features::{Extractor, ExtractorId};
use noisediv::generator::{template_image, Generator, GeneratorKind, GeneratorSpec, Reward, RewardSpec};
use noisediv::objective::{Objective, ObjectiveSpec};
use noisediv::{SeededRng, Tensor};

const H: usize = 4;
const W: usize = 4;

fn px(x: &Tensor, b: usize, c: usize, y: usize, col: usize) -> f64 {
    x.data()[((b * 3 + c) * H + y) * W + col]
}

fn patch(x: &Tensor, b: usize, gi: usize, gj: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for c in 0..3 {
        for y in 0..2 {
            for col in 0..2 {
                v.push(px(x, b, c, 2 * gi + y, 2 * gj + col));
            }
        }
    }
    v
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
    let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)) / 2.0
}

fn oracle_loss(spec: &ObjectiveSpec, x: &Tensor, z: &Tensor, template: &Tensor) -> f64 {
    let mut v = 0.0;
    for gi in 0..2 {
        for gj in 0..2 {
            v += cosine_distance(&patch(x, 0, gi, gj), &patch(x, 1, gi, gj));
        }
    }
    v /= 4.0;

    let n = template.len() as f64;
    let denom = template.data().iter().map(|t| t.max(1.0 - t).powi(2)).sum::<f64>() / n;
    let rewards: Vec<f64> = (0..2)
        .map(|b| {
            let mse = x.row(b).iter().zip(template.data()).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / n;
            1.0 - mse / denom
        })
        .collect();

    let d = z.row_len() as f64;
    let neg_k: Vec<f64> = z
        .rows()
        .map(|row| {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            -((d - 1.0) * sq.sqrt().ln() - 0.5 * sq)
        })
        .collect();

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let shortfall: Vec<f64> = rewards.iter().map(|r| (spec.tau_s - r).max(0.0)).collect();
    -spec.reward_weight * mean(&rewards)
        + spec.lambda_min * mean(&shortfall)
        + spec.lambda_div * (spec.tau_d - v).max(0.0)
        + spec.lambda_reg * mean(&neg_k)
}

#[test]
fn loss_matches_closed_form_arithmetic() {
    let spec = ObjectiveSpec {
        lambda_min: 0.7,
        lambda_div: 1.3,
        lambda_reg: 0.05,
        tau_s: 0.9,
        tau_d: 0.8,
        reward_weight: 0.4,
        metric: DiversityMetric::Cosine,
        reward: RewardSpec::Template { seed: 21 },
        extractor: ExtractorId::PixelPatches { grid: 2 },
    };
    let gen_spec = GeneratorSpec::new(GeneratorKind::Linear { mix_seed: Some(5), gain: 1.0 });
    let gen = Generator::build(&gen_spec, 1, H, W).unwrap();
    let reward = Reward::build(&spec.reward, H, W, None, &[]).unwrap();
    let objective = Objective::new(spec.clone(), Extractor::PixelPatches { grid: 2 }, reward).unwrap();
    let template = template_image(21, H, W).unwrap();

    for seed in 0..10 {
        let z = SeededRng::new(seed).gaussian(&[2, 1, H, W]);
        let eval = objective.evaluate(&gen, &z, None, false).unwrap();
        let bd = &eval.breakdown;
        assert!(bd.quality_hinge > 0.0 && bd.diversity_hinge > 0.0, "hinges inactive: {bd:?}");
        let want = oracle_loss(&spec, eval.images.values(), &z, &template);
        assert!((bd.total - want).abs() < 1e-10, "seed {seed}: {} vs {want}", bd.total);
        assert!((bd.reconstruct() - bd.total).abs() < 1e-10);
    }
}
