//! Coordinate network `q -> [α, β, ρ_b, ρ_s, φ]`.
//!
//! A ReLU MLP over a sinusoidal positional encoding. The encoded input is
//! concatenated back in after `skip_at_layer` hidden layers. Attenuation goes
//! through softplus; the four bounded outputs through a logistic squash.
//!
//! Backpropagation is written out by hand: [`FieldState::forward`] records a
//! [`FieldTape`] and [`FieldState::backward`] accumulates weight gradients
//! into a flat buffer laid out exactly like the parameters.

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::checkpoint::{real_data, real_vec, Checkpoint, Persist};
use crate::error::{Error, Result};
use crate::real::{inv_softplus, logit, sigmoid, softplus, Real};
use crate::rng;
use crate::types::{ParameterSample, Point3};

pub const N_OUTPUTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldConfig {
    pub n_layers: usize,
    pub hidden_width: usize,
    /// The encoded input is concatenated to the output of this hidden layer
    /// (1-based) before it enters the next one.
    pub skip_at_layer: usize,
    pub pe_frequencies: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { n_layers: 8, hidden_width: 256, skip_at_layer: 5, pe_frequencies: 10 }
    }
}

impl FieldConfig {
    /// CPU-sized network used by tests and the default run config.
    pub fn desk() -> Self {
        FieldConfig { n_layers: 4, hidden_width: 64, skip_at_layer: 2, pe_frequencies: 6 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::validation("field n_layers must be >= 2"));
        }
        if self.skip_at_layer < 1 || self.skip_at_layer >= self.n_layers {
            return Err(Error::validation("field skip_at_layer must satisfy 1 <= skip < n_layers"));
        }
        if self.hidden_width == 0 {
            return Err(Error::validation("field hidden_width must be >= 1"));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        3 + 6 * self.pe_frequencies
    }
}

/// `(q, sin(2⁰πq), cos(2⁰πq), ..., sin(2^{L-1}πq), cos(2^{L-1}πq))`, each
/// block holding the three coordinates in order.
pub fn positional_encode(q: Point3, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * frequencies);
    let c = q.to_array();
    out.extend_from_slice(&c);
    for k in 0..frequencies {
        let w = (1u64 << k) as f64 * PI;
        out.extend(c.iter().map(|v| (w * v).sin()));
        out.extend(c.iter().map(|v| (w * v).cos()));
    }
    out
}

fn encode_batch<T: Real>(points: &[Point3], frequencies: usize) -> Array2<T> {
    let dim = 3 + 6 * frequencies;
    let mut enc = Array2::<T>::zeros((points.len(), dim));
    for (mut row, p) in enc.outer_iter_mut().zip(points) {
        for (dst, v) in row.iter_mut().zip(positional_encode(*p, frequencies)) {
            *dst = T::of(v);
        }
    }
    enc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

fn layout(cfg: &FieldConfig) -> (Vec<Dense>, usize) {
    let enc = cfg.encoding_dim();
    let width = cfg.hidden_width;
    let mut off = 0;
    let mut layers = Vec::with_capacity(cfg.n_layers + 1);
    for k in 1..=cfg.n_layers + 1 {
        let fan_in = match k {
            1 => enc,
            k if k == cfg.skip_at_layer + 1 => width + enc,
            _ => width,
        };
        let fan_out = if k == cfg.n_layers + 1 { N_OUTPUTS } else { width };
        let d = Dense { fan_in, fan_out, w: off, b: off + fan_in * fan_out };
        off += d.len();
        layers.push(d);
    }
    (layers, off)
}

/// Output values a freshly initialised field starts from: a nearly
/// transparent medium with mid-grey speckle.
const INIT_OUTPUTS: [f64; N_OUTPUTS] = [0.1, 0.05, 0.05, 0.5, 0.5];

/// Trainable weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState<T: Real = f32> {
    config: FieldConfig,
    layers: Vec<Dense>,
    params: Vec<T>,
}

/// Activations recorded by [`FieldState::forward`].
pub struct FieldTape<T: Real> {
    enc: Array2<T>,
    /// Post-ReLU output of each hidden layer.
    hidden: Vec<Array2<T>>,
    head_pre: Array2<T>,
}

impl<T: Real> FieldTape<T> {
    pub fn len(&self) -> usize {
        self.enc.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.enc.nrows() == 0
    }
}

impl<T: Real> FieldState<T> {
    /// Fan-in scaled uniform initialisation (He bound for hidden layers,
    /// `1/sqrt(fan_in)` for the head); biases are zero except the head, which
    /// starts at [`INIT_OUTPUTS`].
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, n) = layout(&config);
        let mut params = vec![T::zero(); n];
        let mut rng = rng::stream(seed, "field-init", &[]);
        let head = layers.len() - 1;
        for (k, d) in layers.iter().enumerate() {
            let bound = if k == head { (1.0 / d.fan_in as f64).sqrt() } else { (6.0 / d.fan_in as f64).sqrt() };
            for p in &mut params[d.w..d.b] {
                *p = T::of(rng.random_range(-bound..bound));
            }
        }
        let hb = layers[head].b;
        params[hb] = T::of(inv_softplus(INIT_OUTPUTS[0]));
        for i in 1..N_OUTPUTS {
            params[hb + i] = T::of(logit(INIT_OUTPUTS[i]));
        }
        Ok(FieldState { config, layers, params })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FieldState<U> {
        FieldState {
            config: self.config,
            layers: self.layers.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    fn weight(&self, d: &Dense) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((d.fan_in, d.fan_out), &self.params[d.w..d.b]).expect("layout")
    }

    fn bias(&self, d: &Dense) -> &[T] {
        &self.params[d.b..d.b + d.fan_out]
    }

    fn add_bias(&self, z: &mut Array2<T>, d: &Dense) {
        let b = self.bias(d);
        for mut row in z.outer_iter_mut() {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }

    /// Pre-activation of dense layer `k`.
    fn layer_pre(&self, k: usize, enc: &Array2<T>, h: &Array2<T>) -> Array2<T> {
        let d = &self.layers[k];
        let w = self.weight(d);
        let mut z = if k == 0 {
            enc.dot(&w)
        } else if k == self.config.skip_at_layer {
            let e = enc.ncols();
            let mut z = enc.dot(&w.slice(s![..e, ..]));
            general_mat_mul(T::one(), h, &w.slice(s![e.., ..]), T::one(), &mut z);
            z
        } else {
            h.dot(&w)
        };
        self.add_bias(&mut z, d);
        z
    }

    /// Evaluates the network on a batch, returning activated outputs
    /// (`N x 5`, columns in [`ParameterSample`] order) and the tape.
    pub fn forward(&self, points: &[Point3]) -> Result<(Array2<T>, FieldTape<T>)> {
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::validation(format!("non-finite query point {p:?}")));
        }
        let enc = encode_batch::<T>(points, self.config.pe_frequencies);
        let n_hidden = self.config.n_layers;
        let mut hidden: Vec<Array2<T>> = Vec::with_capacity(n_hidden);
        for k in 0..n_hidden {
            let prev = if k == 0 { &enc } else { &hidden[k - 1] };
            let mut z = self.layer_pre(k, &enc, prev);
            z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            hidden.push(z);
        }
        let head_pre = self.layer_pre(n_hidden, &enc, &hidden[n_hidden - 1]);
        let mut out = head_pre.clone();
        for mut row in out.outer_iter_mut() {
            row[0] = softplus(row[0]);
            for v in row.iter_mut().skip(1) {
                *v = sigmoid(*v);
            }
        }
        Ok((out, FieldTape { enc, hidden, head_pre }))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d outputs`
    /// (`N x 5`). Returns `d loss / d point` (`N x 3`) when `want_points`.
    pub fn backward(
        &self,
        tape: &FieldTape<T>,
        d_out: &Array2<T>,
        grad: &mut [T],
        want_points: bool,
    ) -> Option<Array2<T>> {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(d_out.dim(), (tape.len(), N_OUTPUTS));
        let n_hidden = self.config.n_layers;
        let e = tape.enc.ncols();
        let mut dz = d_out.clone();
        for (mut row, pre) in dz.outer_iter_mut().zip(tape.head_pre.outer_iter()) {
            row[0] *= sigmoid(pre[0]);
            for i in 1..N_OUTPUTS {
                let s = sigmoid(pre[i]);
                row[i] *= s * (T::one() - s);
            }
        }
        let mut d_enc = Array2::<T>::zeros(tape.enc.dim());
        for k in (0..=n_hidden).rev() {
            let d = self.layers[k];
            let w = self.weight(&d);
            {
                let (gw, gb) = grad[d.w..d.b + d.fan_out].split_at_mut(d.fan_in * d.fan_out);
                let mut gw = ArrayViewMut2::from_shape((d.fan_in, d.fan_out), gw).expect("layout");
                if k == 0 {
                    general_mat_mul(T::one(), &tape.enc.t(), &dz, T::one(), &mut gw);
                } else if k == self.config.skip_at_layer {
                    general_mat_mul(T::one(), &tape.enc.t(), &dz, T::one(), &mut gw.slice_mut(s![..e, ..]));
                    general_mat_mul(T::one(), &tape.hidden[k - 1].t(), &dz, T::one(), &mut gw.slice_mut(s![e.., ..]));
                } else {
                    general_mat_mul(T::one(), &tape.hidden[k - 1].t(), &dz, T::one(), &mut gw);
                }
                for row in dz.outer_iter() {
                    for (g, &v) in gb.iter_mut().zip(row.iter()) {
                        *g += v;
                    }
                }
            }
            if k == 0 {
                if want_points {
                    general_mat_mul(T::one(), &dz, &w.t(), T::one(), &mut d_enc);
                }
                break;
            }
            let mut dh = if k == self.config.skip_at_layer {
                if want_points {
                    general_mat_mul(T::one(), &dz, &w.slice(s![..e, ..]).t(), T::one(), &mut d_enc);
                }
                dz.dot(&w.slice(s![e.., ..]).t())
            } else {
                dz.dot(&w.t())
            };
            ndarray::Zip::from(&mut dh).and(&tape.hidden[k - 1]).for_each(|g, &h| {
                if h <= T::zero() {
                    *g = T::zero();
                }
            });
            dz = dh;
        }
        want_points.then(|| encoding_backward(&tape.enc, &d_enc, self.config.pe_frequencies))
    }

    pub fn eval_batch(&self, points: &[Point3]) -> Result<Vec<ParameterSample<T>>> {
        let (out, _) = self.forward(points)?;
        Ok(rows_to_samples(&out))
    }

    pub fn eval(&self, q: Point3) -> Result<ParameterSample<T>> {
        Ok(self.eval_batch(&[q])?[0])
    }
}

fn encoding_backward<T: Real>(enc: &Array2<T>, d_enc: &Array2<T>, frequencies: usize) -> Array2<T> {
    let mut dq = Array2::<T>::zeros((enc.nrows(), 3));
    for ((mut g, e), de) in dq.outer_iter_mut().zip(enc.outer_iter()).zip(d_enc.outer_iter()) {
        for c in 0..3 {
            let mut acc = de[c];
            for k in 0..frequencies {
                let w = T::of((1u64 << k) as f64 * PI);
                let sin_i = 3 + 6 * k + c;
                let cos_i = sin_i + 3;
                acc += de[sin_i] * w * e[cos_i];
                acc -= de[cos_i] * w * e[sin_i];
            }
            g[c] = acc;
        }
    }
    dq
}

pub fn rows_to_samples<T: Real>(out: &Array2<T>) -> Vec<ParameterSample<T>> {
    out.outer_iter()
        .map(|r| ParameterSample::from_array([r[0], r[1], r[2], r[3], r[4]]))
        .collect()
}

/// Anything that yields acoustic parameters at scene points.
pub trait ParameterField<T: Real> {
    fn sample_points(&self, points: &[Point3]) -> Result<Vec<ParameterSample<T>>>;
}

impl<T: Real> ParameterField<T> for FieldState<T> {
    fn sample_points(&self, points: &[Point3]) -> Result<Vec<ParameterSample<T>>> {
        self.eval_batch(points)
    }
}

/// The same parameters everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantField<T: Real>(pub ParameterSample<T>);

impl<T: Real> ParameterField<T> for ConstantField<T> {
    fn sample_points(&self, points: &[Point3]) -> Result<Vec<ParameterSample<T>>> {
        Ok(vec![self.0; points.len()])
    }
}

pub fn field_eval<T: Real>(state: &FieldState<T>, q: Point3) -> Result<ParameterSample<T>> {
    state.eval(q)
}

pub fn field_eval_batch<T: Real>(state: &FieldState<T>, points: &[Point3]) -> Result<Vec<ParameterSample<T>>> {
    state.eval_batch(points)
}

impl<T: Real> Persist for FieldState<T> {
    fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let p = format!("{prefix}field/");
        ckpt.set_meta(format!("{p}n_layers"), self.config.n_layers);
        ckpt.set_meta(format!("{p}hidden_width"), self.config.hidden_width);
        ckpt.set_meta(format!("{p}skip_at_layer"), self.config.skip_at_layer);
        ckpt.set_meta(format!("{p}pe_frequencies"), self.config.pe_frequencies);
        ckpt.set_meta(format!("{p}dtype"), T::DTYPE);
        for (k, d) in self.layers.iter().enumerate() {
            ckpt.put(format!("{p}layer{k}/weight"), vec![d.fan_in, d.fan_out], real_data(&self.params[d.w..d.b]));
            ckpt.put(format!("{p}layer{k}/bias"), vec![d.fan_out], real_data(&self.params[d.b..d.b + d.fan_out]));
        }
    }

    fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let p = format!("{prefix}field/");
        let config = FieldConfig {
            n_layers: ckpt.meta_parse(&format!("{p}n_layers"))?,
            hidden_width: ckpt.meta_parse(&format!("{p}hidden_width"))?,
            skip_at_layer: ckpt.meta_parse(&format!("{p}skip_at_layer"))?,
            pe_frequencies: ckpt.meta_parse(&format!("{p}pe_frequencies"))?,
        };
        config.validate()?;
        let dtype = ckpt.meta(&format!("{p}dtype"))?;
        if dtype != T::DTYPE {
            return Err(Error::validation(format!("field checkpoint stores {dtype}, expected {}", T::DTYPE)));
        }
        let (layers, n) = layout(&config);
        let mut params = vec![T::zero(); n];
        for (k, d) in layers.iter().enumerate() {
            for (name, range, shape) in [
                ("weight", d.w..d.b, vec![d.fan_in, d.fan_out]),
                ("bias", d.b..d.b + d.fan_out, vec![d.fan_out]),
            ] {
                let key = format!("{p}layer{k}/{name}");
                let arr = ckpt.get(&key)?;
                if arr.shape != shape {
                    return Err(Error::Shape(format!("{key}: {:?} vs {:?}", arr.shape, shape)));
                }
                params[range].copy_from_slice(&real_vec::<T>(arr)?);
            }
        }
        Ok(FieldState { config, layers, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(seed: u64) -> FieldState<f64> {
        FieldState::new(FieldConfig { n_layers: 2, hidden_width: 8, skip_at_layer: 1, pe_frequencies: 2 }, seed).unwrap()
    }

    #[test]
    fn encoding_of_origin() {
        let e = positional_encode(Point3::ZERO, 4);
        assert_eq!(e.len(), 27);
        for k in 0..4 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
    }

    #[test]
    fn encoding_without_frequencies_is_identity() {
        let q = Point3::new(0.3, -0.2, 0.9);
        assert_eq!(positional_encode(q, 0), vec![0.3, -0.2, 0.9]);
    }

    #[test]
    fn encoding_half_x() {
        let e = positional_encode(Point3::new(0.5, 0.0, 0.0), 1);
        assert!((e[3] - 1.0).abs() < 1e-15);
        assert!(e[6].abs() < 1e-15);
    }

    #[test]
    fn fresh_field_respects_ranges_and_is_deterministic() {
        let f = FieldState::<f32>::new(FieldConfig::desk(), 3).unwrap();
        let pts: Vec<Point3> = (0..50).map(|i| Point3::new(i as f64 / 25.0 - 1.0, 0.3, -0.7)).collect();
        let a = f.eval_batch(&pts).unwrap();
        let b = f.eval_batch(&pts).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.validate().unwrap();
        }
    }

    #[test]
    fn non_finite_point_rejected() {
        let f = micro(1);
        assert!(f.eval(Point3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FieldState::<f32>::new(FieldConfig { n_layers: 1, ..FieldConfig::desk() }, 0).is_err());
        assert!(FieldState::<f32>::new(FieldConfig { skip_at_layer: 4, ..FieldConfig::desk() }, 0).is_err());
        assert!(FieldState::<f32>::new(FieldConfig { skip_at_layer: 0, ..FieldConfig::desk() }, 0).is_err());
        FieldConfig::default().validate().unwrap();
    }

    #[test]
    fn batch_equivariance() {
        let f = micro(2);
        let pts: Vec<Point3> = (0..7).map(|i| Point3::new(0.1 * i as f64, -0.2, 0.05 * i as f64)).collect();
        let out = f.eval_batch(&pts).unwrap();
        assert_eq!(out[3], f.eval(pts[3]).unwrap());
        let mut rev = pts.clone();
        rev.reverse();
        let mut out_rev = f.eval_batch(&rev).unwrap();
        out_rev.reverse();
        assert_eq!(out, out_rev);
    }

    /// Gradient of every output w.r.t. every weight, central differences with h = 1e-4.
    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut f = micro(5);
        let q = Point3::new(0.31, -0.42, 0.57);
        for out in 0..N_OUTPUTS {
            let (_, tape) = f.forward(&[q]).unwrap();
            let mut d = Array2::zeros((1, N_OUTPUTS));
            d[[0, out]] = 1.0;
            let mut g = f.zero_grad();
            f.backward(&tape, &d, &mut g, false);
            for i in 0..f.n_params() {
                let orig = f.params[i];
                f.params[i] = orig + 1e-4;
                let plus = f.forward(&[q]).unwrap().0[[0, out]];
                f.params[i] = orig - 1e-4;
                let minus = f.forward(&[q]).unwrap().0[[0, out]];
                f.params[i] = orig;
                let fd = (plus - minus) / 2e-4;
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-4, "output {out} param {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn point_gradients_match_finite_differences() {
        let f = micro(8);
        let q = Point3::new(-0.21, 0.13, 0.44);
        let (out, tape) = f.forward(&[q]).unwrap();
        let w = [0.3, -1.2, 0.7, 2.0, -0.5];
        let d = Array2::from_shape_fn((1, N_OUTPUTS), |(_, j)| w[j]);
        let mut g = f.zero_grad();
        let dq = f.backward(&tape, &d, &mut g, true).unwrap();
        let loss = |p: Point3| -> f64 {
            let o = f.forward(&[p]).unwrap().0;
            (0..5).map(|j| w[j] * o[[0, j]]).sum()
        };
        let _ = out;
        for c in 0..3 {
            let mut a = q.to_array();
            a[c] += 1e-5;
            let plus = loss(Point3::from_array(a));
            a[c] -= 2e-5;
            let minus = loss(Point3::from_array(a));
            let fd = (plus - minus) / 2e-5;
            assert!((fd - dq[[0, c]]).abs() < 1e-6 * fd.abs().max(1.0), "coord {c}: {fd} vs {}", dq[[0, c]]);
        }
    }

    #[test]
    fn persist_round_trip() {
        let f = FieldState::<f32>::new(FieldConfig::desk(), 9).unwrap();
        let mut c = Checkpoint::new();
        f.write_into(&mut c, "");
        let back = FieldState::<f32>::read_from(&c, "").unwrap();
        assert_eq!(back, f);
        assert!(FieldState::<f64>::read_from(&c, "").is_err());
    }
}
