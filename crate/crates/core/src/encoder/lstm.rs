use std::sync::Arc;

use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_into, sigmoid, tanh_exp, Tape, TensorError, Var};

use super::Result;
use crate::params::ModelError;

/// One layer's handles, gates in the order forget, input, candidate, output.
/// Each weight is `(U + F, U)` with rows ordered `[h; x]`; each bias is `(U)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayer {
    pub w: [Var; 4],
    pub b: [Var; 4],
}

impl LstmLayer {
    fn dims(&self, tape: &Tape, features: usize) -> Result<usize> {
        let u = *tape.shape(self.b[0]).first().unwrap_or(&0);
        for g in 0..4 {
            if tape.shape(self.w[g]) != [u + features, u] || tape.shape(self.b[g]) != [u] {
                return Err(ModelError::Shape {
                    stage: "lstm".into(),
                    expected: vec![u + features, u],
                    got: tape.shape(self.w[g]).to_vec(),
                });
            }
        }
        Ok(u)
    }
}

/// One cell update from primitive tape ops:
/// `f, i, o = σ(W·[h; x] + b)`, `C̃ = tanh(W_C·[h; x] + b_C)`,
/// `C = f⊙C_prev + i⊙C̃`, `h = o⊙tanh(C)`.
pub fn lstm_step(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, layer: &LstmLayer) -> Result<(Var, Var)> {
    let hx = tape.concat_last(&[h_prev, x])?;
    let gate = |g: usize, tape: &mut Tape| -> Result<Var> {
        let z = tape.matmul(hx, layer.w[g])?;
        Ok(tape.add(z, layer.b[g])?)
    };
    let zf = gate(0, tape)?;
    let zi = gate(1, tape)?;
    let zc = gate(2, tape)?;
    let zo = gate(3, tape)?;
    let f = tape.sigmoid(zf)?;
    let i = tape.sigmoid(zi)?;
    let cand = tape.tanh(zc)?;
    let o = tape.sigmoid(zo)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs [`lstm_step`] over a `(B, T, F)` sequence from zero state, stacking
/// layers; returns the last layer's `(B, T, U)` states.
pub fn lstm_sequence(tape: &mut Tape, x: Var, layers: &[LstmLayer]) -> Result<Var> {
    let mut seq = x;
    for layer in layers {
        let (b, t, f) = match *tape.shape(seq) {
            [b, t, f] => (b, t, f),
            _ => {
                return Err(TensorError::Invalid {
                    op: "lstm_sequence",
                    msg: "expected (batch, time, features)".into(),
                }
                .into())
            }
        };
        let u = layer.dims(tape, f)?;
        let precision = tape.value(seq).precision();
        let mut h = tape.constant(crate::tensor::Tensor::zeros(&[b, u], precision));
        let mut c = h;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = tape.select(seq, 1, step)?;
            (h, c) = lstm_step(tape, xt, h, c, layer)?;
            outs.push(h);
        }
        seq = tape.stack(&outs, 1)?;
    }
    Ok(seq)
}

/// The same recurrence as [`lstm_sequence`] for one layer, recorded as a
/// single tape node with hand-written backpropagation through time.
pub fn lstm_layer_fused(tape: &mut Tape, x: Var, layer: &LstmLayer) -> Result<Var> {
    let (bsz, t, f) = match *tape.shape(x) {
        [b, t, f] if t > 0 => (b, t, f),
        _ => {
            return Err(TensorError::Invalid {
                op: "lstm",
                msg: format!(
                    "expected a non-empty (batch, time, features) sequence, got {:?}",
                    tape.shape(x)
                ),
            }
            .into())
        }
    };
    let u = layer.dims(tape, f)?;
    let z = u + f;
    let g4 = 4 * u;
    // Combined (U + F, 4U) weight and (4U) bias, gate blocks side by side.
    let mut w = vec![0.0; z * g4];
    let mut bias = vec![0.0; g4];
    for g in 0..4 {
        let wg = tape.data(layer.w[g]);
        for r in 0..z {
            w[r * g4 + g * u..r * g4 + (g + 1) * u].copy_from_slice(&wg[r * u..(r + 1) * u]);
        }
        bias[g * u..(g + 1) * u].copy_from_slice(tape.data(layer.b[g]));
    }
    let xd = tape.value(x).shared();
    let mut zin = vec![0.0; t * bsz * z];
    let mut acts = vec![0.0; t * bsz * g4];
    let mut cells = vec![0.0; (t + 1) * bsz * u];
    let mut tanh_c = vec![0.0; t * bsz * u];
    let mut out = vec![0.0; bsz * t * u];
    for s in 0..t {
        let zs = &mut zin[s * bsz * z..(s + 1) * bsz * z];
        for b in 0..bsz {
            if s > 0 {
                zs[b * z..b * z + u].copy_from_slice(&out[(b * t + s - 1) * u..(b * t + s) * u]);
            }
            zs[b * z + u..(b + 1) * z].copy_from_slice(&xd[(b * t + s) * f..(b * t + s + 1) * f]);
        }
        let a = &mut acts[s * bsz * g4..(s + 1) * bsz * g4];
        for row in a.chunks_mut(g4) {
            row.copy_from_slice(&bias);
        }
        matmul_into(zs, &w, a, bsz, z, g4);
        for b in 0..bsz {
            let row = &mut a[b * g4..(b + 1) * g4];
            for j in 0..u {
                row[j] = sigmoid(row[j]);
                row[u + j] = sigmoid(row[u + j]);
                row[2 * u + j] = tanh_exp(row[2 * u + j]);
                row[3 * u + j] = sigmoid(row[3 * u + j]);
            }
            for j in 0..u {
                let prev = cells[(s * bsz + b) * u + j];
                let c = row[j] * prev + row[u + j] * row[2 * u + j];
                cells[((s + 1) * bsz + b) * u + j] = c;
                let tc = tanh_exp(c);
                tanh_c[(s * bsz + b) * u + j] = tc;
                out[(b * t + s) * u + j] = row[3 * u + j] * tc;
            }
        }
    }
    let w = Arc::new(w);
    let mut parents = vec![x];
    parents.extend(layer.w);
    parents.extend(layer.b);
    tape.custom(
        "lstm",
        &parents,
        vec![bsz, t, u],
        out,
        Box::new(move |gout, needs| {
            let mut dw = vec![0.0; z * g4];
            let mut db = vec![0.0; g4];
            let mut dx = needs[0].then(|| vec![0.0; bsz * t * f]);
            let mut dh_next = vec![0.0; bsz * u];
            let mut dc_next = vec![0.0; bsz * u];
            let mut dz = vec![0.0; bsz * g4];
            let mut dzin = vec![0.0; bsz * z];
            for s in (0..t).rev() {
                let a = &acts[s * bsz * g4..(s + 1) * bsz * g4];
                for b in 0..bsz {
                    let row = &a[b * g4..(b + 1) * g4];
                    let d = &mut dz[b * g4..(b + 1) * g4];
                    for j in 0..u {
                        let (fg, ig, cg, og) = (row[j], row[u + j], row[2 * u + j], row[3 * u + j]);
                        let tc = tanh_c[(s * bsz + b) * u + j];
                        let prev = cells[(s * bsz + b) * u + j];
                        let dh = gout[(b * t + s) * u + j] + dh_next[b * u + j];
                        let dc = dh * og * (1.0 - tc * tc) + dc_next[b * u + j];
                        d[j] = dc * prev * fg * (1.0 - fg);
                        d[u + j] = dc * cg * ig * (1.0 - ig);
                        d[2 * u + j] = dc * ig * (1.0 - cg * cg);
                        d[3 * u + j] = dh * tc * og * (1.0 - og);
                        dc_next[b * u + j] = dc * fg;
                    }
                }
                let zs = &zin[s * bsz * z..(s + 1) * bsz * z];
                matmul_at_b(zs, &dz, &mut dw, bsz, z, g4);
                for row in dz.chunks(g4) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                dzin.iter_mut().for_each(|v| *v = 0.0);
                matmul_a_bt(&dz, &w, &mut dzin, bsz, z, g4);
                for b in 0..bsz {
                    dh_next[b * u..(b + 1) * u].copy_from_slice(&dzin[b * z..b * z + u]);
                    if let Some(dx) = dx.as_mut() {
                        dx[(b * t + s) * f..(b * t + s + 1) * f].copy_from_slice(&dzin[b * z + u..(b + 1) * z]);
                    }
                }
            }
            let mut res = vec![dx];
            for g in 0..4 {
                res.push(needs[1 + g].then(|| {
                    let mut wg = vec![0.0; z * u];
                    for r in 0..z {
                        wg[r * u..(r + 1) * u].copy_from_slice(&dw[r * g4 + g * u..r * g4 + (g + 1) * u]);
                    }
                    wg
                }));
            }
            for g in 0..4 {
                res.push(needs[5 + g].then(|| db[g * u..(g + 1) * u].to_vec()));
            }
            res
        }),
    )
    .map_err(Into::into)
}
