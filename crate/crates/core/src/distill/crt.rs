//! Classifier re-training: frozen trunk, fresh heads, class-balanced batches.

use super::{steps_per_epoch, Workspace};
use crate::config::TrainConfig;
use crate::data::{to_tensor, ClassBalancedSampler};
use crate::error::Result;
use crate::losses::ce_smoothed;
use crate::models::DualTokenVit;
use crate::optim::{AdamW, Optimizer};
use crate::seed;
use crate::tensor::{Tape, Tensor};

const FEATURE_CHUNK: usize = 100;

/// Reinitializes both heads and trains them on ground truth for
/// `cfg.crt.epochs` epochs. Trunk features are computed once on the
/// unaugmented training images, so the trunk cannot change.
pub fn crt_retrain(cfg: &TrainConfig, ws: &Workspace, student: &DualTokenVit<f32>) -> Result<DualTokenVit<f32>> {
    let mut out = student.clone();
    out.reset_heads(&mut seed::rng(ws.seeds.init, &[3]));
    out.params.set_frozen(|name| !DualTokenVit::<f32>::is_head_param(name));

    let train = &ws.ds.train;
    let d = out.config.embed_dim;
    let (mut fc, mut fd) = (Vec::new(), Vec::new());
    for chunk in train.images.chunks(FEATURE_CHUNK) {
        let e = out.eval(&to_tensor(chunk, &ws.norm), false)?;
        fc.extend_from_slice(e.features_cls.data());
        fd.extend_from_slice(e.features_dist.data());
    }
    let sampler = ClassBalancedSampler::new(&train.labels, ws.ds.n_classes)?;
    let mut opt = AdamW::new(0.0);
    let steps = steps_per_epoch(train.len(), cfg.crt.batch_size);
    let stream = seed::derive(ws.seeds.order, &[3]);
    let gather = |src: &[f32], idx: &[usize]| -> Result<Tensor<f32>> {
        let mut rows = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            rows.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Tensor::new([idx.len(), d], rows)
    };
    for epoch in 0..cfg.crt.epochs {
        for step in 0..steps {
            let idx = sampler.sample(cfg.crt.batch_size, &mut seed::rng(stream, &[epoch as u64, step as u64]));
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = out.params.bind(&mut tape);
            let xc = tape.constant(gather(&fc, &idx)?);
            let xd = tape.constant(gather(&fd, &idx)?);
            let (zc, zd) = out.heads_forward(&mut tape, &bound, xc, xd)?;
            let lc = ce_smoothed(&mut tape, zc, &labels, 0.0)?;
            let ld = ce_smoothed(&mut tape, zd, &labels, 0.0)?;
            let sum = tape.add(lc, ld)?;
            let loss = tape.scale(sum, 0.5);
            tape.backward(loss)?;
            let grads = out.params.grads(&tape, &bound);
            opt.step(&mut out.params, &grads, cfg.crt.lr)?;
        }
    }
    out.params.set_frozen(|_| false);
    Ok(out)
}
