use std::collections::BTreeSet;

use crate::autodiff::{Tape, Tensor};
use crate::backbone::model::Backbone;
use crate::backbone::sequence::{motion_slots, Sequence, Slot};
use crate::backbone::vocab::Special;
use crate::error::{Error, Result};
use crate::patterns::{Layout, MultiStreamTokens, StreamPos};

/// Gradient magnitude below which an input counts as having no influence.
pub const INFLUENCE_THRESHOLD: f64 = 1e-12;

/// Tokens of `m` whose input embedding moves the logits that predict
/// `target`, measured by reverse-mode differentiation.
///
/// The sequence is a motion-begin token followed by `m` laid out with the
/// model's layout. The probed quantity is a fixed generic combination of
/// the stream-`l` logits at the predicting position; a token is influential
/// when any entry of the gradient with respect to its own embedding lookup
/// exceeds [`INFLUENCE_THRESHOLD`] in magnitude.
pub fn jacobian_dependency_probe(model: &Backbone<f64>, m: &MultiStreamTokens, target: StreamPos) -> Result<BTreeSet<StreamPos>> {
    let cfg = model.config();
    if m.levels() != cfg.levels {
        return Err(Error::shape("probe", format!("{} streams for a {}-stream model", m.levels(), cfg.levels)));
    }
    let layout = Layout::new(cfg.layout, m.levels(), m.len())?;
    let predictor = layout.position(target)?;
    let mut slots = vec![Slot::Word(model.vocab().special(Special::MotionBegin))];
    slots.extend(motion_slots(m, cfg.layout));
    let seq = Sequence::prompt(slots, None);

    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, true)?;
    let packed = model.pack(&[&seq])?;
    let hidden = model.hidden(&mut tape, &b, &packed)?;
    let logits = model.stream_logits(&mut tape, &b, hidden.states, target.level - 1, &[predictor])?;
    let k = cfg.codebook_size;
    let weights: Vec<f64> = (0..k).map(|i| 1.0 + 0.5 * ((i as f64) * 1.618).sin()).collect();
    let w = tape.constant(Tensor::from_vec(&[k, 1], weights)?)?;
    let probe = tape.matmul(logits, w)?;
    let probe = tape.sum(probe)?;
    let grads = tape.backward(probe)?;

    let mut out = BTreeSet::new();
    for tok in layout.tokens() {
        let row = layout.position(tok)? + 1;
        let lookup = hidden
            .lookups
            .iter()
            .find(|l| l.level == Some(tok.level - 1) && l.rows.binary_search(&row).is_ok())
            .ok_or_else(|| Error::shape("probe", format!("no lookup for {tok:?}")))?;
        let i = lookup.rows.binary_search(&row).expect("row present");
        let g = grads.wrt(lookup.var);
        if g.row(i).iter().any(|v| v.abs() > INFLUENCE_THRESHOLD) {
            out.insert(tok);
        }
    }
    Ok(out)
}
