//! Gated recurrent unit: single cell, unrolled layer and two-layer stack,
//! with full backpropagation through time.
//!
//! Cell convention (fixed for this crate):
//!   z = sigma(Wz' x + Uz' h_prev + bz)
//!   r = sigma(Wr' x + Ur' h_prev + br)
//!   h~ = tanh(Wh' x + Uh' (r . h_prev) + bh)
//!   h = (1 - z) . h_prev + z . h~
//!
//! With h_0 = 0 every hidden entry stays strictly inside (-1, 1).

use rand::Rng;

use super::mat::{add_outer, add_w_y, add_wt_x, Mat};
use super::NnError;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters of one GRU layer. Also used as the gradient container,
/// since gradients share the exact same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayerParams {
    pub w_z: Mat,
    pub w_r: Mat,
    pub w_h: Mat,
    pub u_z: Mat,
    pub u_r: Mat,
    pub u_h: Mat,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruLayerParams {
    pub fn zeros(d_in: usize, d_f: usize) -> Self {
        GruLayerParams {
            w_z: Mat::zeros(d_in, d_f),
            w_r: Mat::zeros(d_in, d_f),
            w_h: Mat::zeros(d_in, d_f),
            u_z: Mat::zeros(d_f, d_f),
            u_r: Mat::zeros(d_f, d_f),
            u_h: Mat::zeros(d_f, d_f),
            b_z: vec![0.0; d_f],
            b_r: vec![0.0; d_f],
            b_h: vec![0.0; d_f],
        }
    }

    /// Glorot-uniform weight matrices, zero biases.
    pub fn init(d_in: usize, d_f: usize, rng: &mut impl Rng) -> Self {
        GruLayerParams {
            w_z: Mat::glorot_uniform(d_in, d_f, rng),
            w_r: Mat::glorot_uniform(d_in, d_f, rng),
            w_h: Mat::glorot_uniform(d_in, d_f, rng),
            u_z: Mat::glorot_uniform(d_f, d_f, rng),
            u_r: Mat::glorot_uniform(d_f, d_f, rng),
            u_h: Mat::glorot_uniform(d_f, d_f, rng),
            b_z: vec![0.0; d_f],
            b_r: vec![0.0; d_f],
            b_h: vec![0.0; d_f],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_z.is_finite()
            && self.w_r.is_finite()
            && self.w_h.is_finite()
            && self.u_z.is_finite()
            && self.u_r.is_finite()
            && self.u_h.is_finite()
            && self.b_z.iter().all(|v| v.is_finite())
            && self.b_r.iter().all(|v| v.is_finite())
            && self.b_h.iter().all(|v| v.is_finite())
    }

    /// Appends all parameter values in canonical order
    /// (w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h).
    pub fn append_values(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w_z.values());
        out.extend_from_slice(self.w_r.values());
        out.extend_from_slice(self.w_h.values());
        out.extend_from_slice(self.u_z.values());
        out.extend_from_slice(self.u_r.values());
        out.extend_from_slice(self.u_h.values());
        out.extend_from_slice(&self.b_z);
        out.extend_from_slice(&self.b_r);
        out.extend_from_slice(&self.b_h);
    }

    /// Loads values in canonical order, consuming from the front of `src`.
    pub fn load_values(&mut self, src: &mut &[f64]) {
        fn take(src: &mut &[f64], dst: &mut [f64]) {
            let (head, tail) = src.split_at(dst.len());
            dst.copy_from_slice(head);
            *src = tail;
        }
        take(src, self.w_z.values_mut());
        take(src, self.w_r.values_mut());
        take(src, self.w_h.values_mut());
        take(src, self.u_z.values_mut());
        take(src, self.u_r.values_mut());
        take(src, self.u_h.values_mut());
        take(src, &mut self.b_z);
        take(src, &mut self.b_r);
        take(src, &mut self.b_h);
    }

    pub fn value_count(&self) -> usize {
        let d_in = self.input_dim();
        let d_f = self.hidden_dim();
        3 * d_in * d_f + 3 * d_f * d_f + 3 * d_f
    }

    /// Applies `f` in place to every parameter value.
    pub fn for_each_value_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for m in [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
        ] {
            m.values_mut().iter_mut().for_each(&mut f);
        }
        for b in [&mut self.b_z, &mut self.b_r, &mut self.b_h] {
            b.iter_mut().for_each(&mut f);
        }
    }

    /// Applies `f` to each (own, other) value pair; both sides must share
    /// shapes. Used for gradient accumulation.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        let pairs = [
            (&mut self.w_z, &other.w_z),
            (&mut self.w_r, &other.w_r),
            (&mut self.w_h, &other.w_h),
            (&mut self.u_z, &other.u_z),
            (&mut self.u_r, &other.u_r),
            (&mut self.u_h, &other.u_h),
        ];
        for (a, b) in pairs {
            for (x, &y) in a.values_mut().iter_mut().zip(b.values()) {
                f(x, y);
            }
        }
        let bias_pairs = [
            (&mut self.b_z, &other.b_z),
            (&mut self.b_r, &other.b_r),
            (&mut self.b_h, &other.b_h),
        ];
        for (a, b) in bias_pairs {
            for (x, &y) in a.iter_mut().zip(b) {
                f(x, y);
            }
        }
    }
}

/// Gate activations cached by the forward pass, one entry per time step.
#[derive(Clone, Debug)]
pub struct GruLayerTrace {
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    h_tilde: Vec<Vec<f64>>,
    /// Hidden states h_1..h_n (h_0 is the zero vector and not stored).
    pub states: Mat,
}

/// One GRU step: returns the next hidden state.
pub fn gru_cell_forward(
    x: &[f64],
    h_prev: &[f64],
    params: &GruLayerParams,
) -> Result<Vec<f64>, NnError> {
    let (h, _, _, _) = cell_forward_gates(x, h_prev, params)?;
    Ok(h)
}

#[allow(clippy::type_complexity)]
fn cell_forward_gates(
    x: &[f64],
    h_prev: &[f64],
    params: &GruLayerParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), NnError> {
    let d_in = params.input_dim();
    let d_f = params.hidden_dim();
    if x.len() != d_in || h_prev.len() != d_f {
        return Err(NnError::ShapeMismatch {
            context: "gru_cell_forward",
            expected: format!("x: {d_in}, h_prev: {d_f}"),
            got: format!("x: {}, h_prev: {}", x.len(), h_prev.len()),
        });
    }

    let mut z = params.b_z.clone();
    add_wt_x(&mut z, &params.w_z, x);
    add_wt_x(&mut z, &params.u_z, h_prev);
    for v in &mut z {
        *v = sigmoid(*v);
    }

    let mut r = params.b_r.clone();
    add_wt_x(&mut r, &params.w_r, x);
    add_wt_x(&mut r, &params.u_r, h_prev);
    for v in &mut r {
        *v = sigmoid(*v);
    }

    let gated: Vec<f64> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri * hi).collect();
    let mut h_tilde = params.b_h.clone();
    add_wt_x(&mut h_tilde, &params.w_h, x);
    add_wt_x(&mut h_tilde, &params.u_h, &gated);
    for v in &mut h_tilde {
        *v = v.tanh();
    }

    let h: Vec<f64> = z
        .iter()
        .zip(h_prev)
        .zip(&h_tilde)
        .map(|((&zi, &hi), &ci)| (1.0 - zi) * hi + zi * ci)
        .collect();
    Ok((h, z, r, h_tilde))
}

/// Unrolls one layer over the rows of `inputs` (h_0 = 0), returning all
/// hidden states plus the trace needed for backpropagation.
pub fn gru_layer_forward(
    params: &GruLayerParams,
    inputs: &Mat,
) -> Result<GruLayerTrace, NnError> {
    let n = inputs.rows();
    if n == 0 {
        return Err(NnError::EmptySequence);
    }
    let d_f = params.hidden_dim();
    let mut states = Mat::zeros(n, d_f);
    let mut z_all = Vec::with_capacity(n);
    let mut r_all = Vec::with_capacity(n);
    let mut c_all = Vec::with_capacity(n);

    let mut h_prev = vec![0.0; d_f];
    for k in 0..n {
        let (h, z, r, h_tilde) = cell_forward_gates(inputs.row(k), &h_prev, params)?;
        states.row_mut(k).copy_from_slice(&h);
        z_all.push(z);
        r_all.push(r);
        c_all.push(h_tilde);
        h_prev = h;
    }

    Ok(GruLayerTrace {
        z: z_all,
        r: r_all,
        h_tilde: c_all,
        states,
    })
}

/// Backpropagation through time for one layer.
///
/// `d_states` holds dL/dh_k for every step from the paths above this layer;
/// the recurrent contribution is accumulated internally. Returns parameter
/// gradients and dL/dX.
pub fn gru_layer_backward(
    params: &GruLayerParams,
    inputs: &Mat,
    trace: &GruLayerTrace,
    d_states: &Mat,
) -> (GruLayerParams, Mat) {
    let n = inputs.rows();
    let d_in = params.input_dim();
    let d_f = params.hidden_dim();
    debug_assert_eq!(d_states.rows(), n);
    debug_assert_eq!(d_states.cols(), d_f);

    let mut grads = GruLayerParams::zeros(d_in, d_f);
    let mut d_inputs = Mat::zeros(n, d_in);
    let zero = vec![0.0; d_f];
    // dL/dh_{k-1} carried backwards through the recurrence
    let mut carry = vec![0.0; d_f];

    for k in (0..n).rev() {
        let x = inputs.row(k);
        let h_prev = if k == 0 { &zero[..] } else { trace.states.row(k - 1) };
        let z = &trace.z[k];
        let r = &trace.r[k];
        let h_tilde = &trace.h_tilde[k];

        let dh: Vec<f64> = d_states
            .row(k)
            .iter()
            .zip(&carry)
            .map(|(&a, &b)| a + b)
            .collect();

        let mut da_z = vec![0.0; d_f];
        let mut da_h = vec![0.0; d_f];
        let mut next_carry = vec![0.0; d_f];
        for i in 0..d_f {
            let dz = dh[i] * (h_tilde[i] - h_prev[i]);
            da_z[i] = dz * z[i] * (1.0 - z[i]);
            let dc = dh[i] * z[i];
            da_h[i] = dc * (1.0 - h_tilde[i] * h_tilde[i]);
            next_carry[i] = dh[i] * (1.0 - z[i]);
        }

        // d(r . h_prev) flows back through U_h
        let mut d_gated = vec![0.0; d_f];
        add_w_y(&mut d_gated, &params.u_h, &da_h);

        let mut da_r = vec![0.0; d_f];
        for i in 0..d_f {
            let dr = d_gated[i] * h_prev[i];
            da_r[i] = dr * r[i] * (1.0 - r[i]);
            next_carry[i] += d_gated[i] * r[i];
        }

        let gated: Vec<f64> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri * hi).collect();
        add_outer(&mut grads.w_z, x, &da_z);
        add_outer(&mut grads.w_r, x, &da_r);
        add_outer(&mut grads.w_h, x, &da_h);
        add_outer(&mut grads.u_z, h_prev, &da_z);
        add_outer(&mut grads.u_r, h_prev, &da_r);
        add_outer(&mut grads.u_h, &gated, &da_h);
        for i in 0..d_f {
            grads.b_z[i] += da_z[i];
            grads.b_r[i] += da_r[i];
            grads.b_h[i] += da_h[i];
        }

        let dx = d_inputs.row_mut(k);
        add_w_y(dx, &params.w_z, &da_z);
        add_w_y(dx, &params.w_r, &da_r);
        add_w_y(dx, &params.w_h, &da_h);

        add_w_y(&mut next_carry, &params.u_z, &da_z);
        add_w_y(&mut next_carry, &params.u_r, &da_r);
        carry = next_carry;
    }

    (grads, d_inputs)
}

/// Forward trace of a two-layer stack.
#[derive(Clone, Debug)]
pub struct GruStackTrace {
    pub layer1: GruLayerTrace,
    pub layer2: GruLayerTrace,
}

impl GruStackTrace {
    /// Top-layer hidden states, one row per time step.
    pub fn top_states(&self) -> &Mat {
        &self.layer2.states
    }
}

/// Runs the two-layer stack and keeps the traces for backpropagation.
pub fn gru_stack_forward(
    layers: &[GruLayerParams; 2],
    inputs: &Mat,
) -> Result<GruStackTrace, NnError> {
    let layer1 = gru_layer_forward(&layers[0], inputs)?;
    let layer2 = gru_layer_forward(&layers[1], &layer1.states)?;
    Ok(GruStackTrace { layer1, layer2 })
}

/// Two-layer forward pass returning the n x d_f matrix of top-layer states.
pub fn gru_forward(layers: &[GruLayerParams; 2], inputs: &Mat) -> Result<Mat, NnError> {
    Ok(gru_stack_forward(layers, inputs)?.layer2.states)
}

/// BPTT through both layers; returns per-layer gradients and dL/dX.
pub fn gru_stack_backward(
    layers: &[GruLayerParams; 2],
    inputs: &Mat,
    trace: &GruStackTrace,
    d_top_states: &Mat,
) -> ([GruLayerParams; 2], Mat) {
    let (g2, d_mid) = gru_layer_backward(&layers[1], &trace.layer1.states, &trace.layer2, d_top_states);
    let (g1, d_inputs) = gru_layer_backward(&layers[0], inputs, &trace.layer1, &d_mid);
    ([g1, g2], d_inputs)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_params_halve_previous_state() {
        // z = 0.5, h~ = 0 -> h = 0.5 * h_prev
        let params = GruLayerParams::zeros(3, 2);
        let h = gru_cell_forward(&[1.0, -2.0, 0.5], &[0.8, -0.4], &params).unwrap();
        assert_eq!(h, vec![0.4, -0.2]);
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let params = GruLayerParams::zeros(3, 2);
        let h = gru_cell_forward(&[1.0, 2.0, 3.0], &[0.0, 0.0], &params).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn state_stays_strictly_inside_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = GruLayerParams::init(4, 5, &mut rng);
        let inputs = Mat::from_fn(20, 4, |_, _| rng.random_range(-3.0..3.0));
        let trace = gru_layer_forward(&params, &inputs).unwrap();
        for k in 0..20 {
            for &v in trace.states.row(k) {
                assert!(v > -1.0 && v < 1.0, "state {v} escaped (-1, 1)");
            }
        }
    }

    #[test]
    fn cell_rejects_shape_mismatch() {
        let params = GruLayerParams::zeros(3, 2);
        assert!(gru_cell_forward(&[1.0], &[0.0, 0.0], &params).is_err());
        assert!(gru_cell_forward(&[1.0, 2.0, 3.0], &[0.0], &params).is_err());
    }

    #[test]
    fn stack_rejects_empty_sequence() {
        let layers = [GruLayerParams::zeros(3, 2), GruLayerParams::zeros(2, 2)];
        let empty = Mat::zeros(0, 3);
        assert!(matches!(
            gru_forward(&layers, &empty),
            Err(NnError::EmptySequence)
        ));
    }

    #[test]
    fn stack_output_is_prefix_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers = [
            GruLayerParams::init(3, 4, &mut rng),
            GruLayerParams::init(4, 4, &mut rng),
        ];
        let full = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let prefix = Mat::from_fn(3, 3, |r, c| full[(r, c)]);
        let h_full = gru_forward(&layers, &full).unwrap();
        let h_prefix = gru_forward(&layers, &prefix).unwrap();
        for k in 0..3 {
            assert_eq!(h_full.row(k), h_prefix.row(k));
        }
    }

    #[test]
    fn single_step_matches_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = [
            GruLayerParams::init(3, 4, &mut rng),
            GruLayerParams::init(4, 4, &mut rng),
        ];
        let x = Mat::from_fn(1, 3, |_, c| c as f64 * 0.3 - 0.2);
        let h = gru_forward(&layers, &x).unwrap();
        let h1 = gru_cell_forward(x.row(0), &[0.0; 4], &layers[0]).unwrap();
        let h2 = gru_cell_forward(&h1, &[0.0; 4], &layers[1]).unwrap();
        assert_eq!(h.row(0), &h2[..]);
    }

    /// BPTT must match central finite differences on a scalar loss.
    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d_in = 3;
        let d_f = 4;
        let n = 5;
        let params = GruLayerParams::init(d_in, d_f, &mut rng);
        let inputs = Mat::from_fn(n, d_in, |_, _| rng.random_range(-1.0..1.0));

        // loss = sum of all hidden states
        let loss = |p: &GruLayerParams, x: &Mat| -> f64 {
            let trace = gru_layer_forward(p, x).unwrap();
            trace.states.values().iter().sum()
        };

        let trace = gru_layer_forward(&params, &inputs).unwrap();
        let d_states = Mat::from_fn(n, d_f, |_, _| 1.0);
        let (grads, d_inputs) = gru_layer_backward(&params, &inputs, &trace, &d_states);

        let eps = 1e-6;
        let mut flat = Vec::new();
        params.append_values(&mut flat);
        let mut grad_flat = Vec::new();
        grads.append_values(&mut grad_flat);

        for idx in (0..flat.len()).step_by(7) {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            fp[idx] += eps;
            plus.load_values(&mut &fp[..]);
            let mut fm = flat.clone();
            fm[idx] -= eps;
            minus.load_values(&mut &fm[..]);
            let numeric = (loss(&plus, &inputs) - loss(&minus, &inputs)) / (2.0 * eps);
            let analytic = grad_flat[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "param {idx}: analytic {analytic} vs numeric {numeric}"
            );
        }

        // input gradients
        for k in 0..n {
            for c in 0..d_in {
                let mut xp = inputs.clone();
                xp[(k, c)] += eps;
                let mut xm = inputs.clone();
                xm[(k, c)] -= eps;
                let numeric = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * eps);
                let analytic = d_inputs[(k, c)];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "input ({k},{c}): analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn values_round_trip_in_canonical_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = GruLayerParams::init(3, 2, &mut rng);
        let mut flat = Vec::new();
        params.append_values(&mut flat);
        assert_eq!(flat.len(), params.value_count());
        let mut restored = GruLayerParams::zeros(3, 2);
        restored.load_values(&mut &flat[..]);
        assert_eq!(restored, params);
    }
}
