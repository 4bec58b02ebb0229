//! The training loop: batches of instance pairs, semi-hard mining, triplet
//! loss, backward, SGD. Single-threaded and bitwise reproducible given
//! `(config, seed)`.

use crate::checkpoint::{capture_model, restore_model, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, EvalResult};
use crate::grad::{chain_backward, sgd_step, ModelGrads};
use crate::linalg::{Matrix, Vector};
use crate::metric::{mine_semi_hard, triplet_loss, Batch};
use crate::model::PoolModel;
use crate::pooling::FeatureSet;
use crate::rng::SeedSplitter;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Everything a finished training run produces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PoolModel,
    pub log: Vec<TrainRecord>,
    pub checkpoint: Checkpoint,
}

/// Generates the configured dataset and trains on its train split.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = generate_dataset(&config.dataset_spec())?;
    train_on(config, &dataset)
}

/// Trains on an existing dataset (the dataset seed is the caller's
/// concern; everything else still flows from `config.seed`).
pub fn train_on(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let splitter = SeedSplitter::new(config.seed);
    let spec = config.model_spec()?;
    let init_feats: Vec<FeatureSet> = dataset
        .train
        .iter()
        .take(8)
        .map(|s| s.features.clone())
        .collect();
    let mut model = PoolModel::init(&spec, &splitter, Some(&init_feats))?;
    let mut log = Vec::with_capacity(config.steps);
    run_steps(config, dataset, &mut model, &mut log)?;
    let mut checkpoint = Checkpoint::new(config.to_flat_json(), config.steps as u64);
    checkpoint.tensors = capture_model(&model);
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
    })
}

fn run_steps(
    config: &RunConfig,
    dataset: &Dataset,
    model: &mut PoolModel,
    log: &mut Vec<TrainRecord>,
) -> Result<()> {
    // instances with at least two train samples can form pairs
    let mut by_instance: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.train.iter().enumerate() {
        by_instance.entry(s.instance).or_default().push(i);
    }
    let instances: Vec<u64> = by_instance
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&k, _)| k)
        .collect();
    if instances.is_empty() {
        return Err(Error::input(
            "train",
            "no instance has two train samples to pair",
        ));
    }
    let pairs_per_batch = (config.batch_size / 2).min(instances.len());
    let mut rng = splitter_for(config).stream("batch");

    for step_idx in 0..config.steps {
        // choose distinct instances, then two distinct samples of each
        let chosen = index::sample(&mut rng, instances.len(), pairs_per_batch);
        let mut members: Vec<usize> = Vec::with_capacity(pairs_per_batch * 2);
        let mut labels: Vec<u64> = Vec::with_capacity(pairs_per_batch * 2);
        for inst_idx in chosen.iter() {
            let inst = instances[inst_idx];
            let pool = &by_instance[&inst];
            let picked = index::sample(&mut rng, pool.len(), 2);
            for p in picked.iter() {
                members.push(pool[p]);
                labels.push(inst);
            }
        }

        // forward
        let mut embeddings = Matrix::zeros(members.len(), model.out_dim());
        for (row, &si) in members.iter().enumerate() {
            let z = model.embed(&dataset.train[si].features)?;
            embeddings.row_mut(row).copy_from_slice(z.as_slice());
        }
        let batch = Batch::new(embeddings, labels)?;
        let mined = mine_semi_hard(&batch, config.margin);
        let (loss, d_embeddings) = triplet_loss(&batch, &mined, config.margin)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!(
                    "loss at step {step_idx} (batch train indices {:?})",
                    members
                ),
            });
        }

        if !mined.triplets.is_empty() && loss > 0.0 {
            let mut acc: Option<ModelGrads> = None;
            for (row, &si) in members.iter().enumerate() {
                let upstream_row = d_embeddings.row(row);
                if upstream_row.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let upstream = Vector::new(upstream_row.to_vec());
                let (_, grads) = chain_backward(model, &dataset.train[si].features, &upstream)?;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.accumulate(&grads)?,
                }
            }
            if let Some(grads) = acc {
                sgd_step(model, &grads, config.lr)?;
            }
        }

        log.push(TrainRecord {
            step: step_idx as u64,
            loss,
            lr: config.lr,
            seed: config.seed,
        });
    }
    Ok(())
}

fn splitter_for(config: &RunConfig) -> SeedSplitter {
    SeedSplitter::new(config.seed)
}

/// Embeds `samples` and scores Recall@K with the sample set as its own
/// gallery (self-matches excluded).
pub fn evaluate_model(model: &PoolModel, samples: &[Sample], ks: &[usize]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::input("eval", "no samples to evaluate"));
    }
    let mut embeddings = Matrix::zeros(samples.len(), model.out_dim());
    let mut labels = Vec::with_capacity(samples.len());
    for (row, s) in samples.iter().enumerate() {
        let z = model.embed(&s.features)?;
        embeddings.row_mut(row).copy_from_slice(z.as_slice());
        labels.push(s.instance);
    }
    recall_at_k(&embeddings, &labels, &embeddings, &labels, ks, true)
}

/// Rebuilds the configuration and model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, PoolModel)> {
    let config = RunConfig::from_flat_json(&ckpt.config_json)?;
    let spec = config.model_spec()?;
    let mut model = PoolModel::init(&spec, &SeedSplitter::new(config.seed), None)?;
    restore_model(&mut model, &ckpt.tensors)?;
    Ok((config, model))
}
