//! Generate an adversarial feature vector against a trained classifier.
//!
//! Trains a random forest target and an MLP substitute on a synthetic
//! authorship dataset, then runs the combined attack (CW-L0, PGD,
//! rand-cor, rand) on one held-out vector and post-processes the result.
//!
//! Usage: cargo run --example attack_vector

use ghostwriter::correlation::build_partition;
use ghostwriter::features::FeatureVector;
use ghostwriter::learners::{train_mlp, train_rf, Classifier, MlpParams, RfParams};
use ghostwriter::vecmod::{
    attack_combined, postprocess, value_caps, AttackContext, AttackMode, AttackSpec, AttemptLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AUTHORS: usize = 3;
const SAMPLES_PER_AUTHOR: usize = 12;
const WIDTH: usize = 12;

/// Synthetic corpus: each author has a distinctive base rate per column,
/// and columns 4 and 5 deliberately track column 3 so the correlation
/// stage has something to merge.
fn synthesize() -> (Vec<FeatureVector>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for author in 0..AUTHORS {
        for s in 0..SAMPLES_PER_AUTHOR {
            let mut counts = vec![0u64; WIDTH];
            for (col, c) in counts.iter_mut().enumerate() {
                let base = ((author * 7 + col * 3) % 9) as u64;
                *c = base + rng.gen_range(0..3);
            }
            counts[4] = counts[3] * 2;
            counts[5] = counts[3] + 4;
            xs.push(FeatureVector {
                id: format!("author{author}-{s}"),
                counts,
            });
            ys.push(author);
        }
    }
    (xs, ys)
}

fn main() {
    let (vectors, labels) = synthesize();
    // Hold out the last vector of author 0 as the attack victim.
    let victim_idx = SAMPLES_PER_AUTHOR - 1;
    let victim = vectors[victim_idx].clone();
    let train: Vec<FeatureVector> = vectors
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != victim_idx)
        .map(|(_, v)| v.clone())
        .collect();
    let train_labels: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != victim_idx)
        .map(|(_, &y)| y)
        .collect();

    let raw: Vec<Vec<f64>> = train.iter().map(|v| v.as_f64()).collect();
    let part = build_partition(&raw, 0.9);
    println!(
        "{} columns merge into {} partitions",
        part.width(),
        part.partitions.len()
    );

    let target = train_rf(&raw, &train_labels, RfParams::default()).unwrap();
    let merged: Vec<Vec<f64>> = train.iter().map(|v| part.merge(v).unwrap()).collect();
    let substitute = train_mlp(
        &merged,
        &train_labels,
        MlpParams {
            epochs: 120,
            ..Default::default()
        },
    )
    .unwrap();

    let true_label = target.predict_label(&victim.as_f64()).unwrap();
    println!("target classifies the victim as author {true_label}");

    let caps = value_caps(&train);
    let ctx = AttackContext {
        table: &toy_table(),
        value_caps: &caps,
        true_label,
        target: &target,
    };
    let spec = AttackSpec::new(AttackMode::Untargeted, 7);
    let mut log = AttemptLog::default();
    let delta = attack_combined(&victim, &spec, &ctx, &substitute, &part, &mut log)
        .expect("attack should succeed on this easy dataset");
    println!(
        "attack succeeded via {} after {} candidates, {} columns changed",
        delta.strategy,
        delta.iterations,
        delta.support()
    );

    let post = postprocess(
        &victim,
        &delta,
        &mut |c: &[u64]| {
            let xf: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            target.predict_label(&xf).unwrap() != true_label
        },
        &mut log,
    );
    println!("post-processing kept {} columns: {:?}", post.support(), post.changes);

    let final_label = target
        .predict_label(&post.apply(&victim).iter().map(|&v| v as f64).collect::<Vec<_>>())
        .unwrap();
    println!("target now classifies the vector as author {final_label}");

    let mut per_strategy = std::collections::BTreeMap::new();
    for r in &log.records {
        *per_strategy.entry(r.strategy).or_insert(0usize) += 1;
    }
    println!("candidates tested per strategy: {per_strategy:?}");
}

/// A nominal feature table naming the synthetic columns; groups only
/// matter for masking, which this example leaves wide open.
fn toy_table() -> ghostwriter::FeatureTable {
    let mut tsv = String::new();
    for i in 0..WIDTH {
        tsv += &format!("LINEAR\tLINEAR_INSTR\t0.5\tsynthetic feature {i:02}\n");
    }
    ghostwriter::FeatureTable::from_tsv(&tsv).unwrap()
}
