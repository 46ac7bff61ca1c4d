//! Differentiable layer equations recorded on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which axis of the linear attention matrix `A = (QX)ᵀ(KX)` the softmax
/// normalizes.
///
/// `Columns` makes the weights over the `T` source positions of every output
/// position sum to one, so each output column of `VX · sm(A)` is a convex
/// combination of value columns. `Rows` normalizes the rows of `A` instead.
/// The two agree whenever `A` is symmetric (tied query and key matrices).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrientation {
    #[default]
    Columns,
    Rows,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "threshold")]
pub enum Nonlinearity {
    Relu,
    SoftThreshold(f64),
}

impl Nonlinearity {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Nonlinearity::Relu => tape.relu(x),
            Nonlinearity::SoftThreshold(g) => tape.soft_threshold(x, g),
        }
    }
}

fn expect_shape(
    tape: &Tape,
    v: Var,
    rows: usize,
    cols: usize,
    what: &'static str,
) -> Result<()> {
    let got = tape.value(v).shape();
    if got != [rows, cols] {
        return Err(Error::Shape {
            op: what,
            left: got,
            right: [rows, cols],
        });
    }
    Ok(())
}

/// `values · sm[(queries)ᵀ(keys)]` with the softmax taken per `orientation`.
pub fn attend(
    tape: &mut Tape,
    values: Var,
    queries: Var,
    keys: Var,
    orientation: AttentionOrientation,
) -> Result<Var> {
    match orientation {
        AttentionOrientation::Columns => {
            // softmax over u of A[u, t], computed as the row softmax of Aᵀ
            let kt = tape.transpose(keys)?;
            let at = tape.matmul(kt, queries)?;
            let weights_t = tape.softmax_rows(at)?;
            let weights = tape.transpose(weights_t)?;
            tape.matmul(values, weights)
        }
        AttentionOrientation::Rows => {
            let qt = tape.transpose(queries)?;
            let a = tape.matmul(qt, keys)?;
            let weights = tape.softmax_rows(a)?;
            tape.matmul(values, weights)
        }
    }
}

/// Attention and perceptron weights of one generic transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub w: Var,
    pub u: Var,
}

/// `Z = (V X) · sm[(Q X)ᵀ (K X)]` for `X: N × T`, giving `Z: D × T`.
pub fn attention_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    orientation: AttentionOrientation,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let d = tape.value(p.q).rows();
    expect_shape(tape, p.q, d, n, "attention_forward(Q)")?;
    expect_shape(tape, p.k, d, n, "attention_forward(K)")?;
    let dv = tape.value(p.v).rows();
    expect_shape(tape, p.v, dv, n, "attention_forward(V)")?;
    let qx = tape.matmul(p.q, x)?;
    let kx = tape.matmul(p.k, x)?;
    let vx = tape.matmul(p.v, x)?;
    attend(tape, vx, qx, kx, orientation)
}

/// `Y = σ(W Z + U X)` with `Z` from [`attention_forward`].
pub fn layer_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    nonlin: Nonlinearity,
    orientation: AttentionOrientation,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let dv = tape.value(p.v).rows();
    expect_shape(tape, p.w, n, dv, "layer_forward(W)")?;
    expect_shape(tape, p.u, n, n, "layer_forward(U)")?;
    let z = attention_forward(tape, x, p, orientation)?;
    let wz = tape.matmul(p.w, z)?;
    let ux = tape.matmul(p.u, x)?;
    let pre = tape.add(wz, ux)?;
    nonlin.apply(tape, pre)
}

/// `W_s = (M + Mᵀ) / 2`.
pub fn symmetrize(tape: &mut Tape, m: Var) -> Result<Var> {
    let mt = tape.transpose(m)?;
    tape.weighted_sum(&[(m, 0.5), (mt, 0.5)])
}

/// Tied-weight unrolled transformer layer:
/// `X½ = (1 − η) X + η · X · sm[(W₁X)ᵀ(W₁X)]`, then `relu(W_s X½)` with
/// `W_s = (M + Mᵀ)/2`.
pub fn ut_layer_forward(
    tape: &mut Tape,
    x: Var,
    shared: Var,
    m: Var,
    eta: f64,
    orientation: AttentionOrientation,
) -> Result<Var> {
    let pre = ut_preactivation(tape, x, shared, m, eta, orientation)?;
    tape.relu(pre)
}

/// `W_s X½`, the UT layer output before the ReLU.
pub fn ut_preactivation(
    tape: &mut Tape,
    x: Var,
    shared: Var,
    m: Var,
    eta: f64,
    orientation: AttentionOrientation,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let d = tape.value(shared).rows();
    expect_shape(tape, shared, d, n, "ut_layer_forward(W1)")?;
    expect_shape(tape, m, n, n, "ut_layer_forward(M)")?;
    let proj = tape.matmul(shared, x)?;
    let attended = attend(tape, x, proj, proj, orientation)?;
    let half = if eta == 1.0 {
        attended
    } else {
        tape.weighted_sum(&[(x, 1.0 - eta), (attended, eta)])?
    };
    let ws = symmetrize(tape, m)?;
    tape.matmul(ws, half)
}

/// Fixed scalars of the sparse-coding layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DustHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub c: f64,
}

impl Default for DustHyper {
    fn default() -> Self {
        DustHyper {
            lambda1: 0.9,
            lambda2: 0.25,
            c: 1.0,
        }
    }
}

/// One DUST layer on codes `H: K × T` for signal `X: m × T`:
///
/// ```text
/// H½ = λ₂ · H · sm(Hᵀ Dᵀ D H)
/// H⁺ = φ_{λ₁/c}(U H½ + V X),   U = I − DᵀD / c,   V = Dᵀ / c
/// ```
///
/// Pass `h = None` for the all-zero initial code, which skips the attention
/// step since it maps zero to zero.
pub fn dust_layer_forward(
    tape: &mut Tape,
    h: Option<Var>,
    x: Var,
    dict: Var,
    hyper: &DustHyper,
    orientation: AttentionOrientation,
) -> Result<Var> {
    let pre = dust_preactivation(tape, h, x, dict, hyper, orientation)?;
    tape.soft_threshold(pre, hyper.lambda1 / hyper.c)
}

/// `U H½ + V X`, the DUST code update before soft-thresholding.
pub fn dust_preactivation(
    tape: &mut Tape,
    h: Option<Var>,
    x: Var,
    dict: Var,
    hyper: &DustHyper,
    orientation: AttentionOrientation,
) -> Result<Var> {
    if !(hyper.c > 0.0) {
        return Err(Error::param(format!("DUST c must be positive, got {}", hyper.c)));
    }
    let m = tape.value(x).rows();
    let t = tape.value(x).cols();
    let k = tape.value(dict).cols();
    expect_shape(tape, dict, m, k, "dust_layer_forward(D)")?;
    let dt = tape.transpose(dict)?;
    let vx = tape.matmul(dt, x)?;
    let inv_c = 1.0 / hyper.c;
    match h {
        Some(h) => {
            expect_shape(tape, h, k, t, "dust_layer_forward(H)")?;
            let dh = tape.matmul(dict, h)?;
            let attended = attend(tape, h, dh, dh, orientation)?;
            // U H½ = H½ − Dᵀ(D H½)/c
            let half = tape.scale(attended, hyper.lambda2)?;
            let d_half = tape.matmul(dict, half)?;
            let gram_half = tape.matmul(dt, d_half)?;
            tape.weighted_sum(&[(half, 1.0), (gram_half, -inv_c), (vx, inv_c)])
        }
        None => tape.scale(vx, inv_c),
    }
}

/// `X̂ = D H`.
pub fn dust_reconstruct(tape: &mut Tape, h: Var, dict: Var) -> Result<Var> {
    let k = tape.value(dict).cols();
    if tape.value(h).rows() != k {
        return Err(Error::Shape {
            op: "dust_reconstruct(H)",
            left: tape.value(h).shape(),
            right: [k, tape.value(h).cols()],
        });
    }
    tape.matmul(dict, h)
}

#[derive(Clone, Copy, Debug)]
pub struct ReadoutVars {
    pub w: Var,
    pub b: Var,
}

/// Mean-pools the columns of `Y: N × T`, then `softmax(W p + b)` as a `1 × C` row.
pub fn readout_forward(tape: &mut Tape, y: Var, r: &ReadoutVars) -> Result<Var> {
    let n = tape.value(y).rows();
    let c = tape.value(r.w).rows();
    expect_shape(tape, r.w, c, n, "readout_forward(W)")?;
    expect_shape(tape, r.b, c, 1, "readout_forward(b)")?;
    let pooled = tape.mean_cols(y)?;
    let wp = tape.matmul(r.w, pooled)?;
    let logits = tape.add(wp, r.b)?;
    let row = tape.transpose(logits)?;
    tape.softmax_rows(row)
}

/// `(1/T) ‖X − Y‖²_F`.
pub fn denoising_loss(tape: &mut Tape, clean: Var, output: Var) -> Result<Var> {
    let t = tape.value(clean).cols() as f64;
    let diff = tape.sub(output, clean)?;
    let sq = tape.frobenius_sq(diff)?;
    tape.scale(sq, 1.0 / t)
}

/// Attention energy
/// `g₁(X; W) = −Σ_t Σ_u exp(−½‖W x_t − W x_u‖²) + ½ Σ_t ‖W x_t‖²`.
///
/// Diagnostic only; it is not part of any training objective.
pub fn energy_g1(x: &Tensor, w: &Tensor) -> Result<f64> {
    let y = w.matmul(x)?;
    let t = y.cols();
    let cols: Vec<Vec<f64>> = (0..t).map(|j| y.column(j)).collect();
    let mut attraction = 0.0;
    for a in &cols {
        for b in &cols {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            attraction += (-0.5 * d2).exp();
        }
    }
    Ok(-attraction + 0.5 * y.frobenius_sq())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_special_cases() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, -1.0], &[0.5, 0.0, 3.0]]);
        let w0 = Tensor::zeros(2, 2);
        assert_eq!(energy_g1(&x, &w0).unwrap(), -9.0);

        let x1 = Tensor::from_rows(&[&[1.0], &[2.0]]);
        let w = Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]);
        let wx = w.matmul(&x1).unwrap();
        let expected = -1.0 + 0.5 * wx.frobenius_sq();
        assert!((energy_g1(&x1, &w).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn dust_rejects_nonpositive_c() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        let d = tape.constant(Tensor::identity(2));
        let hyper = DustHyper { c: 0.0, ..DustHyper::default() };
        let r = dust_layer_forward(&mut tape, None, x, d, &hyper, AttentionOrientation::Columns);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn shape_errors_name_the_matrix() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(4, 3));
        let p = AttentionVars {
            q: tape.constant(Tensor::zeros(2, 4)),
            k: tape.constant(Tensor::zeros(2, 5)),
            v: tape.constant(Tensor::zeros(2, 4)),
            w: tape.constant(Tensor::zeros(4, 2)),
            u: tape.constant(Tensor::zeros(4, 4)),
        };
        let err = attention_forward(&mut tape, x, &p, AttentionOrientation::Columns).unwrap_err();
        assert!(err.to_string().contains("(K)"), "{err}");
    }
}
