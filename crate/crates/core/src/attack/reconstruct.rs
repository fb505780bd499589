use crate::autodiff::Tape;
use crate::model::{BlockStack, InputAdapter, Params, TokenBatch};
use crate::tensor::Tensor;

use super::inverter::Inverter;
use super::{AttackConfig, AttackError, Result};

const BACKOFF: [f32; 4] = [1.0, 0.5, 0.25, 0.125];
const NORM_FLOOR: f64 = 1e-30;

/// Recovered tokens together with how well they explain the observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub tokens: TokenBatch,
    /// Relative activation mismatch of `tokens`.
    pub mismatch: f64,
    /// Objective value after every accepted refinement or search move,
    /// starting with the initial value.
    pub trace: Vec<f64>,
}

fn mean_sq(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len().max(1) as f64
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64
}

fn adapter_output(adapter: &InputAdapter, tokens: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = adapter.bind(&mut tape, false)?;
    let f = adapter.forward(&mut tape, &bound, tokens)?;
    Ok(tape.value(f.out).clone())
}

fn check_shape(adapter: &InputAdapter, observed: &Tensor) -> Result<(usize, usize, usize)> {
    let s = observed.shape();
    let d = adapter.tok_emb.shape()[1];
    if s.len() != 3 || s[2] != d {
        return Err(AttackError::Contract(format!(
            "observed activation {s:?} is not [B, T, {d}]"
        )));
    }
    Ok((s[0], s[1], d))
}

/// `mean((A(x) - a)^2) / mean(a^2)` for the adapter `A`.
pub fn activation_mismatch(adapter: &InputAdapter, tokens: &TokenBatch, observed: &Tensor) -> Result<f64> {
    let a = adapter_output(adapter, tokens)?;
    if a.shape() != observed.shape() {
        return Err(AttackError::Contract(format!(
            "candidate activation {:?} vs observed {:?}",
            a.shape(),
            observed.shape()
        )));
    }
    Ok(mean_sq_diff(a.data(), observed.data()) / mean_sq(observed.data()).max(NORM_FLOOR))
}

/// Mean squared activation error of the relaxed input `softmax(z)` and its
/// gradient with respect to `z`.
fn relaxed_objective(
    adapter: &InputAdapter,
    z: &Tensor,
    observed: &Tensor,
    want_grad: bool,
) -> Result<(f64, Vec<f32>)> {
    let mut tape = Tape::new();
    let bound = adapter.bind(&mut tape, false)?;
    let zv = if want_grad {
        tape.param(z.clone())?
    } else {
        tape.constant(z.clone())?
    };
    let p = tape.softmax(zv, 2)?;
    let tok = tape.matmul(p, bound.0[0])?;
    let emb = adapter.add_positions(&mut tape, &bound, tok)?;
    let out = adapter.layers(&mut tape, &bound, emb)?;
    let target = tape.constant(observed.clone())?;
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    let value = tape.value(loss).data()[0] as f64;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.get_or_zeros(zv)))
}

fn argmax_tokens(z: &Tensor) -> Result<TokenBatch> {
    let s = z.shape();
    let ids = z
        .data()
        .chunks(s[2])
        .map(|r| crate::model::train::argmax(r) as u32)
        .collect();
    Ok(TokenBatch::new(s[0], s[1], ids)?)
}

/// Inverter decoding followed, if enabled, by refinement of a softmax
/// relaxation against the observed activation `[B, T, D]`.
pub fn reconstruct_from_activations(
    adapter: &InputAdapter,
    inverter: &Inverter,
    observed: &Tensor,
    cfg: &AttackConfig,
) -> Result<Reconstruction> {
    let (b, t, _) = check_shape(adapter, observed)?;
    let decoded = inverter.decode(observed)?;
    let decoded_mismatch = activation_mismatch(adapter, &decoded, observed)?;
    if !cfg.activation_match || cfg.refine_steps == 0 {
        return Ok(Reconstruction {
            tokens: decoded,
            mismatch: decoded_mismatch,
            trace: vec![decoded_mismatch],
        });
    }
    let mut z = inverter.logits(observed)?.reshaped(&[b, t, inverter.vocab()])?;
    let (mut value, mut grad) = relaxed_objective(adapter, &z, observed, true)?;
    let mut trace = vec![value];
    for _ in 0..cfg.refine_steps {
        let rms = mean_sq(&grad).sqrt();
        if rms == 0.0 {
            break;
        }
        let mut accepted = None;
        for f in BACKOFF {
            let step = (cfg.refine_lr * f) as f64 / rms;
            let data: Vec<f32> = z
                .data()
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| (v as f64 - step * g as f64) as f32)
                .collect();
            let cand = Tensor::new(z.shape().to_vec(), data)?;
            let (v, g) = relaxed_objective(adapter, &cand, observed, true)?;
            if v < value {
                accepted = Some((cand, v, g));
                break;
            }
        }
        match accepted {
            Some((cand, v, g)) => {
                z = cand;
                value = v;
                grad = g;
                trace.push(v);
            }
            None => break,
        }
    }
    let refined = argmax_tokens(&z)?;
    let refined_mismatch = activation_mismatch(adapter, &refined, observed)?;
    let (tokens, mismatch) = if refined_mismatch < decoded_mismatch {
        (refined, refined_mismatch)
    } else {
        (decoded, decoded_mismatch)
    };
    Ok(Reconstruction {
        tokens,
        mismatch,
        trace,
    })
}

/// Observations of one training step, restricted to a single sequence.
struct RowTarget<'a> {
    a1: &'a [f32],
    g2: &'a [f32],
    g1: Vec<f32>,
    a_norm: f64,
    g_norm: f64,
}

/// Cotangent pulled back through `backbone` at the activation `a`.
fn backbone_vjp(backbone: &BlockStack, a: Tensor, cotangent: &[f32]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, false)?;
    let x = tape.param(a)?;
    let out = backbone.forward(&mut tape, &bound, x)?;
    let grads = tape.backward_seeded(&[(out, cotangent.to_vec())])?;
    Ok(grads.get_or_zeros(x))
}

/// Relative activation and gradient mismatch of one candidate sequence.
fn row_objective(adapter: &InputAdapter, backbone: &BlockStack, row: &[u32], target: &RowTarget) -> Result<(f64, f64)> {
    let tokens = TokenBatch::new(1, row.len(), row.to_vec())?;
    let a = adapter_output(adapter, &tokens)?;
    let act = mean_sq_diff(a.data(), target.a1) / target.a_norm;
    let g = backbone_vjp(backbone, a, target.g2)?;
    Ok((act, mean_sq_diff(&g, &target.g1) / target.g_norm))
}

/// Coordinate search over the inverter's top candidates scoring both the
/// activation and the gradient the server returned for this step. A swap
/// is kept only when it lowers one mismatch without raising the other.
///
/// `observed_g2` is the gradient the client sent for the backbone output;
/// `backbone` must be the server's weights as used for that step's forward
/// pass. Each sequence is searched independently.
#[allow(clippy::too_many_arguments)]
pub fn gradient_matching_attack(
    adapter: &InputAdapter,
    backbone: &BlockStack,
    inverter: &Inverter,
    start: &TokenBatch,
    observed_a1: &Tensor,
    observed_g2: &Tensor,
    cfg: &AttackConfig,
) -> Result<Reconstruction> {
    let (b, t, d) = check_shape(adapter, observed_a1)?;
    if observed_g2.shape() != observed_a1.shape() || start.batch != b || start.seq != t {
        return Err(AttackError::Contract(format!(
            "mismatched shapes: a1 {:?}, g2 {:?}, start {}x{}",
            observed_a1.shape(),
            observed_g2.shape(),
            start.batch,
            start.seq
        )));
    }
    let candidates = inverter.top_k(observed_a1, cfg.top_k)?;
    let row_len = t * d;
    let mut ids = start.ids.clone();
    let mut total = 0.0;
    let mut initial = 0.0;
    for r in 0..b {
        let a1 = &observed_a1.data()[r * row_len..(r + 1) * row_len];
        let g2 = &observed_g2.data()[r * row_len..(r + 1) * row_len];
        let a_row = Tensor::new(vec![1, t, d], a1.to_vec())?;
        let g1 = backbone_vjp(backbone, a_row, g2)?;
        let target = RowTarget {
            a1,
            g2,
            a_norm: mean_sq(a1).max(NORM_FLOOR),
            g_norm: mean_sq(&g1).max(NORM_FLOOR),
            g1,
        };
        let row = &mut ids[r * t..(r + 1) * t];
        let mut best = row_objective(adapter, backbone, row, &target)?;
        initial += best.0 + best.1;
        for _ in 0..cfg.search_rounds.max(1) {
            let mut improved = false;
            for pos in 0..t {
                for &c in &candidates[r * t + pos] {
                    if c == row[pos] {
                        continue;
                    }
                    let keep = row[pos];
                    row[pos] = c;
                    let v = row_objective(adapter, backbone, row, &target)?;
                    if v.0 <= best.0 && v.1 <= best.1 && v != best {
                        best = v;
                        improved = true;
                    } else {
                        row[pos] = keep;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        total += best.0 + best.1;
    }
    let tokens = TokenBatch::new(b, t, ids)?;
    let mismatch = activation_mismatch(adapter, &tokens, observed_a1)?;
    Ok(Reconstruction {
        tokens,
        mismatch,
        trace: vec![initial / b as f64, total / b as f64],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::train_inverter;
    use crate::model::{build_model, ModelConfig, ModelPartition, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelPartition, Inverter) {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_heads: 2,
            n_layers_total: 3,
            max_seq_len: 6,
            split: Split(1, 1, 1),
        };
        let m = build_model(&cfg, 4).unwrap();
        let corpus = batches(6, 1);
        let acfg = AttackConfig {
            inverter_steps: 60,
            inverter_hidden: 32,
            ..AttackConfig::default()
        };
        let inv = train_inverter(&m.input, &corpus, &acfg).unwrap();
        (m, inv)
    }

    fn batches(n: usize, seed: u64) -> Vec<TokenBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TokenBatch::new(4, 6, (0..24).map(|_| rng.random_range(0..20)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn refinement_never_increases_the_objective() {
        let (m, inv) = setup();
        let truth = &batches(1, 7)[0];
        let a1 = adapter_output(&m.input, truth).unwrap();
        let cfg = AttackConfig {
            refine_steps: 15,
            ..AttackConfig::default()
        };
        let r = reconstruct_from_activations(&m.input, &inv, &a1, &cfg).unwrap();
        assert!(r.trace.len() >= 2);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        let stage2 = activation_mismatch(&m.input, &inv.decode(&a1).unwrap(), &a1).unwrap();
        assert!(r.mismatch <= stage2);
        let again = reconstruct_from_activations(&m.input, &inv, &a1, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let (m, _) = setup();
        let truth = &batches(1, 8)[0];
        let a1 = adapter_output(&m.input, truth).unwrap();
        assert_eq!(activation_mismatch(&m.input, truth, &a1).unwrap(), 0.0);
    }

    #[test]
    fn gradient_search_recovers_from_candidates() {
        let (m, inv) = setup();
        let truth = &batches(1, 9)[0];
        let a1 = adapter_output(&m.input, truth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g2 = Tensor::new(
            a1.shape().to_vec(),
            (0..a1.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let start = TokenBatch::new(4, 6, vec![0; 24]).unwrap();
        // Candidates widened to the full vocabulary so the truth is reachable.
        let cfg = AttackConfig {
            top_k: 20,
            search_rounds: 3,
            ..AttackConfig::default()
        };
        let r = gradient_matching_attack(&m.input, &m.backbone, &inv, &start, &a1, &g2, &cfg).unwrap();
        assert_eq!(&r.tokens, truth);
        assert!(r.trace[1] <= r.trace[0]);
        assert!(r.mismatch < 1e-12);
    }
}
