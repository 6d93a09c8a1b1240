//! Multi-head MLP with analytic backprop and Adam.
//!
//! Parameters live in one flat `f32` buffer laid out `W1, b1, W2, b2, W3, b3`
//! with row-major weights (`out × in`), which is also the serialized order.
//! Batches are row-major `rows × width` matrices; the dense products go
//! through `matrixmultiply::sgemm`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::par::{self, Parallelism};

pub const LEAKY_SLOPE: f32 = 0.01;

/// Output layout: `[occlusion, local_t, normal×3, albedo×3, material×N_mat]`.
pub const OUT_OCCLUSION: usize = 0;
pub const OUT_LOCAL_T: usize = 1;
pub const OUT_NORMAL: usize = 2;
pub const OUT_ALBEDO: usize = 5;
pub const OUT_MATERIAL: usize = 8;
/// Outputs that do not depend on the material count.
pub const FIXED_OUTPUTS: usize = 8;

/// Rows per work item in batched inference.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub materials: usize,
}

impl MlpShape {
    pub fn output(&self) -> usize {
        FIXED_OUTPUTS + self.materials
    }

    /// `(out, in)` of each dense layer.
    pub fn layers(&self) -> [(usize, usize); 3] {
        [
            (self.hidden, self.input),
            (self.hidden, self.hidden),
            (self.output(), self.hidden),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Start of weight matrix `l`; its bias follows at `+ out·in`.
    fn offset(&self, layer: usize) -> usize {
        self.layers()[..layer].iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum MlpError {
    #[error("input has {got} values, expected a multiple of {width}")]
    InputShape { got: usize, width: usize },
    #[error("parameter buffer has {got} values, expected {expected}")]
    ParamShape { got: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    shape: MlpShape,
    data: Vec<f32>,
}

/// Per-layer outputs kept from a forward pass: hidden layers after the
/// activation, the last layer as raw logits.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    pub rows: usize,
    pub h1: Vec<f32>,
    pub h2: Vec<f32>,
    pub z: Vec<f32>,
}

#[inline]
fn lrelu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `c (m×n) = beta·c + a (m×k) · bᵀ` where `b` is `n×k` row-major.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`, both row-major.
fn gemm_atb_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m×n) = a (m×k) · b` where `b` is `k×n` row-major.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Fills `w` with draws from `Normal(0, sqrt(2 / fan_in))`.
pub fn kaiming_init<R: Rng>(w: &mut [f32], fan_in: usize, rng: &mut R) {
    assert!(fan_in > 0);
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    w.iter_mut().for_each(|x| *x = normal.sample(rng));
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.param_count()],
        }
    }

    /// Kaiming-normal weights, zero biases.
    pub fn kaiming<R: Rng>(shape: MlpShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for l in 0..3 {
            let (_, fan_in) = shape.layers()[l];
            kaiming_init(p.weight_mut(l), fan_in, rng);
        }
        p
    }

    pub fn from_data(shape: MlpShape, data: Vec<f32>) -> Result<Self, MlpError> {
        if data.len() != shape.param_count() {
            return Err(MlpError::ParamShape {
                got: data.len(),
                expected: shape.param_count(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn weight(&self, layer: usize) -> &[f32] {
        let (o, i) = self.shape.layers()[layer];
        let s = self.shape.offset(layer);
        &self.data[s..s + o * i]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f32] {
        let (o, i) = self.shape.layers()[layer];
        let s = self.shape.offset(layer);
        &mut self.data[s..s + o * i]
    }

    pub fn bias(&self, layer: usize) -> &[f32] {
        let (o, i) = self.shape.layers()[layer];
        let s = self.shape.offset(layer) + o * i;
        &self.data[s..s + o]
    }

    /// Forward pass over `x` (`rows × input`), reusing `acts` buffers.
    pub fn forward(&self, x: &[f32], acts: &mut Activations) -> Result<(), MlpError> {
        let width = self.shape.input;
        if !x.len().is_multiple_of(width) {
            return Err(MlpError::InputShape { got: x.len(), width });
        }
        let rows = x.len() / width;
        let (hidden, out) = (self.shape.hidden, self.shape.output());
        acts.rows = rows;
        acts.h1.resize(rows * hidden, 0.0);
        acts.h2.resize(rows * hidden, 0.0);
        acts.z.resize(rows * out, 0.0);
        Self::dense(rows, x, self.weight(0), self.bias(0), &mut acts.h1, true);
        Self::dense(rows, &acts.h1, self.weight(1), self.bias(1), &mut acts.h2, true);
        Self::dense(rows, &acts.h2, self.weight(2), self.bias(2), &mut acts.z, false);
        Ok(())
    }

    fn dense(rows: usize, x: &[f32], w: &[f32], b: &[f32], y: &mut [f32], activate: bool) {
        let n = b.len();
        let k = w.len() / n;
        for row in y.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
        gemm_abt(rows, k, n, x, w, 1.0, y);
        if activate {
            y.iter_mut().for_each(|v| *v = lrelu(*v));
        }
    }

    /// Backward pass. `dz` is the loss gradient with respect to the raw
    /// outputs; parameter gradients are added into `grads` (same layout as
    /// the parameters). When `dx` is given it receives the input gradient.
    pub fn backward(
        &self,
        x: &[f32],
        acts: &Activations,
        dz: &[f32],
        grads: &mut [f32],
        dx: Option<&mut [f32]>,
    ) {
        let rows = acts.rows;
        let (input, hidden, out) = (self.shape.input, self.shape.hidden, self.shape.output());
        assert_eq!(dz.len(), rows * out);
        assert_eq!(grads.len(), self.data.len());

        let mut d2 = vec![0.0f32; rows * hidden];
        let mut d1 = vec![0.0f32; rows * hidden];
        self.layer_grads(2, dz, &acts.h2, rows, grads);
        gemm_ab(rows, out, hidden, dz, self.weight(2), &mut d2);
        mask_lrelu(&mut d2, &acts.h2);
        self.layer_grads(1, &d2, &acts.h1, rows, grads);
        gemm_ab(rows, hidden, hidden, &d2, self.weight(1), &mut d1);
        mask_lrelu(&mut d1, &acts.h1);
        self.layer_grads(0, &d1, x, rows, grads);
        if let Some(dx) = dx {
            assert_eq!(dx.len(), rows * input);
            gemm_ab(rows, hidden, input, &d1, self.weight(0), dx);
        }
    }

    fn layer_grads(&self, layer: usize, delta: &[f32], input: &[f32], rows: usize, grads: &mut [f32]) {
        let (o, i) = self.shape.layers()[layer];
        let s = self.shape.offset(layer);
        let (gw, rest) = grads[s..].split_at_mut(o * i);
        gemm_atb_acc(o, rows, i, delta, input, gw);
        let gb = &mut rest[..o];
        for row in delta.chunks_exact(o) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    /// Raw outputs for a batch, chunked across workers.
    pub fn infer(&self, x: &[f32], policy: Parallelism) -> Result<Vec<f32>, MlpError> {
        let width = self.shape.input;
        if !x.len().is_multiple_of(width) {
            return Err(MlpError::InputShape { got: x.len(), width });
        }
        let rows = x.len() / width;
        let out = self.shape.output();
        let parts = par::map_chunks(policy, rows, INFER_CHUNK, |r| {
            let mut acts = Activations::default();
            self.forward(&x[r.start * width..r.end * width], &mut acts)
                .expect("chunk width checked");
            acts.z
        });
        let mut z = Vec::with_capacity(rows * out);
        parts.into_iter().for_each(|p| z.extend(p));
        Ok(z)
    }
}

fn mask_lrelu(delta: &mut [f32], h: &[f32]) {
    for (d, &h) in delta.iter_mut().zip(h) {
        if h <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
}

/// Activated heads of one output row.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub occlusion: f32,
    pub local_t: f32,
    /// Not normalized.
    pub normal: [f32; 3],
    pub albedo: [f32; 3],
    pub material_probs: Vec<f32>,
}

impl HeadOutputs {
    pub fn from_logits(z: &[f32]) -> Self {
        let n = &z[OUT_NORMAL..OUT_NORMAL + 3];
        let a = &z[OUT_ALBEDO..OUT_ALBEDO + 3];
        Self {
            occlusion: sigmoid(z[OUT_OCCLUSION]),
            local_t: sigmoid(z[OUT_LOCAL_T]),
            normal: [n[0], n[1], n[2]],
            albedo: [sigmoid(a[0]), sigmoid(a[1]), sigmoid(a[2])],
            material_probs: softmax(&z[OUT_MATERIAL..]),
        }
    }

    pub fn material_index(&self) -> usize {
        argmax(&self.material_probs)
    }
}

pub fn softmax(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// First index of the largest value.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let c2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let (c1, c2) = ((1.0 / c1) as f32, (1.0 / c2) as f32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m * c1;
            let vhat = *v * c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> MlpShape {
        MlpShape { input: 12, hidden: 16, materials: 3 }
    }

    #[test]
    fn default_parameter_count() {
        let s = MlpShape { input: 108, hidden: 128, materials: 1 };
        assert_eq!(s.param_count(), 31_625);
        assert_eq!(s.output(), 9);
    }

    #[test]
    fn kaiming_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = vec![0.0f32; 1_000_000];
        kaiming_init(&mut w, 2, &mut rng);
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 0.02);

        let p = MlpParams::kaiming(shape(), &mut ChaCha8Rng::seed_from_u64(2));
        for l in 0..3 {
            assert!(p.bias(l).iter().all(|&b| b == 0.0));
        }
        assert_eq!(p, MlpParams::kaiming(shape(), &mut ChaCha8Rng::seed_from_u64(2)));
    }

    #[test]
    fn zero_network_heads() {
        let p = MlpParams::zeros(MlpShape { input: 108, hidden: 128, materials: 4 });
        let mut acts = Activations::default();
        p.forward(&[0.0; 108], &mut acts).unwrap();
        let h = HeadOutputs::from_logits(&acts.z);
        assert_eq!(h.occlusion, 0.5);
        assert_eq!(h.local_t, 0.5);
        assert_eq!(h.normal, [0.0; 3]);
        assert_eq!(h.albedo, [0.5; 3]);
        assert_eq!(h.material_probs, vec![0.25; 4]);

        let single = HeadOutputs::from_logits(&[3.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 41.0]);
        assert_eq!(single.material_probs, vec![1.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = MlpShape { input: 108, hidden: 128, materials: 2 };
        let p = MlpParams::kaiming(s, &mut rng);
        let rows = 37;
        let x: Vec<f32> = (0..rows * 108).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acts = Activations::default();
        p.forward(&x, &mut acts).unwrap();
        let p64: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
        for r in 0..rows {
            let x64: Vec<f64> = x[r * 108..(r + 1) * 108].iter().map(|&v| v as f64).collect();
            let (z, _) = reference::forward_row(s, &p64, &x64);
            let got = HeadOutputs::from_logits(&acts.z[r * 10..(r + 1) * 10]);
            let z32: Vec<f32> = z.iter().map(|&v| v as f32).collect();
            let want = HeadOutputs::from_logits(&z32);
            let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(diff(&acts.z[r * 10..(r + 1) * 10], &z32) < 1e-5);
            assert!((got.occlusion - want.occlusion).abs() < 1e-6);
            assert!((got.local_t - want.local_t).abs() < 1e-6);
            assert!(diff(&got.albedo, &want.albedo) < 1e-6);
            assert!(diff(&got.material_probs, &want.material_probs) < 1e-6);
        }
        assert_eq!(
            p.infer(&x, Parallelism::Sequential).unwrap(),
            p.infer(&x, Parallelism::Parallel).unwrap()
        );
        assert!(p.infer(&x[..100], Parallelism::Sequential).is_err());
    }

    /// Scalar test loss `Σ c·z` evaluated by the f64 reference.
    fn ref_loss(s: MlpShape, p: &[f64], x: &[f64], c: &[f64]) -> (f64, Vec<f64>) {
        let (z, pre) = reference::forward_row(s, p, x);
        (z.iter().zip(c).map(|(a, b)| a * b).sum(), pre)
    }

    fn same_signs(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MlpParams::kaiming(s, &mut rng);
        let x: Vec<f32> = (0..s.input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f32> = (0..s.output()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acts = Activations::default();
        p.forward(&x, &mut acts).unwrap();
        let mut grads = vec![0.0; s.param_count()];
        let mut dx = vec![0.0; s.input];
        p.backward(&x, &acts, &c, &mut grads, Some(&mut dx));

        let p64: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let c64: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        let (_, pre0) = ref_loss(s, &p64, &x64, &c64);
        let h = 1e-3;
        let check = |fd: f64, an: f32| {
            let rel = (fd - an as f64).abs() / (fd.abs().max(an.abs() as f64)).max(1e-6);
            assert!(rel < 1e-3 || (fd - an as f64).abs() < 1e-7, "{fd} vs {an}");
        };
        let mut checked = 0;
        for _ in 0..400 {
            if checked == 64 {
                break;
            }
            let i = rng.random_range(0..s.param_count());
            let (mut up, mut down) = (p64.clone(), p64.clone());
            up[i] += h;
            down[i] -= h;
            let (lu, pu) = ref_loss(s, &up, &x64, &c64);
            let (ld, pd) = ref_loss(s, &down, &x64, &c64);
            if !same_signs(&pu, &pre0) || !same_signs(&pd, &pre0) {
                continue;
            }
            check((lu - ld) / (2.0 * h), grads[i]);
            checked += 1;
        }
        assert_eq!(checked, 64);
        for i in 0..s.input {
            let (mut up, mut down) = (x64.clone(), x64.clone());
            up[i] += h;
            down[i] -= h;
            let (lu, pu) = ref_loss(s, &p64, &up, &c64);
            let (ld, pd) = ref_loss(s, &p64, &down, &c64);
            if same_signs(&pu, &pre0) && same_signs(&pd, &pre0) {
                check((lu - ld) / (2.0 * h), dx[i]);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::kaiming(s, &mut rng);
        let x: Vec<f32> = (0..3 * s.input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acts = Activations::default();
        p.forward(&x, &mut acts).unwrap();
        let mut grads = vec![0.0; s.param_count()];
        let mut dx = vec![1.0; x.len()];
        p.backward(&x, &acts, &vec![0.0; 3 * s.output()], &mut grads, Some(&mut dx));
        assert!(grads.iter().chain(&dx).all(|&g| g == 0.0));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut st = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0f32, 2.0, 3.0];
        st.step(&mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);

        let mut st = AdamState::new(AdamConfig::default(), 2);
        let mut p = vec![0.5f32, 0.5];
        st.step(&mut p, &[3.7, -0.02]);
        assert!((p[0] - (0.5 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (0.5 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_alternating_gradients_do_not_drift() {
        let mut st = AdamState::new(AdamConfig::default(), 1);
        let mut p = vec![0.0f32];
        let mut before = 0.0;
        for k in 0..100 {
            if k == 98 {
                before = p[0];
            }
            st.step(&mut p, &[if k % 2 == 0 { 1.0 } else { -1.0 }]);
        }
        assert!((p[0] - before).abs() < 0.01 / 10.0);
    }
}
