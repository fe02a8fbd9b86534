use crate::backbone::{Backbone, Sequence};
use crate::data::{MotionSequence, JOINTS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_pair(op: &'static str, a: &MotionSequence, b: &MotionSequence) -> Result<usize> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{}×{} against {}×{}", a.len(), a.dim(), b.len(), b.dim())));
    }
    if a.is_empty() || a.dim() % JOINTS != 0 {
        return Err(Error::shape(op, format!("{} features do not split into {JOINTS} joints", a.dim())));
    }
    Ok(a.dim() / JOINTS)
}

/// Per-frame mean Euclidean joint error.
fn frame_errors(a: &MotionSequence, b: &MotionSequence, coords: usize) -> Vec<f64> {
    a.frames()
        .zip(b.frames())
        .map(|(x, y)| {
            x.chunks(coords)
                .zip(y.chunks(coords))
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / JOINTS as f64
        })
        .collect()
}

/// Mean over frames and joints of the Euclidean joint error. Frames are
/// read as [`JOINTS`] joints of equal coordinate count.
pub fn mpjpe(x: &MotionSequence, y: &MotionSequence) -> Result<f64> {
    let coords = check_pair("mpjpe", x, y)?;
    let e = frame_errors(x, y, coords);
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Average and final displacement error.
pub fn ade_fde(pred: &MotionSequence, gt: &MotionSequence) -> Result<(f64, f64)> {
    let coords = check_pair("ade_fde", pred, gt)?;
    let e = frame_errors(pred, gt, coords);
    Ok((e.iter().sum::<f64>() / e.len() as f64, *e.last().expect("non-empty")))
}

/// Teacher-forced mean NLL of each motion stream over `seqs`.
pub fn per_stream_nll<S: Scalar>(model: &Backbone<S>, seqs: &[Sequence]) -> Result<Vec<f64>> {
    let report = model.nll(seqs)?;
    report
        .streams
        .iter()
        .enumerate()
        .map(|(l, s)| s.mean().ok_or_else(|| Error::EmptyLoss(format!("no stream-{} targets", l + 1))))
        .collect()
}
