//! Encoder/decoder layer table and forward passes.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Graph, Tensor, Var};

pub const LATENT_DIM: usize = 64;
pub const INPUT_SHAPE: [usize; 3] = [3, 28, 28];
pub const PIXELS: usize = 3 * 28 * 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
    Deconv,
}

/// One row of the layer table. Shapes exclude the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeom,
    pub out_pad: usize,
    pub relu: bool,
    pub out_shape: [usize; 3],
}

impl LayerSpec {
    const fn conv(name: &'static str, c_in: usize, c_out: usize, k: usize, s: usize, p: usize, out: usize) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Conv,
            c_in,
            c_out,
            geom: ConvGeom::new(k, s, p),
            out_pad: 0,
            relu: true,
            out_shape: [c_out, out, out],
        }
    }

    const fn dense(name: &'static str) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Dense,
            c_in: LATENT_DIM,
            c_out: LATENT_DIM,
            geom: ConvGeom::new(1, 1, 0),
            out_pad: 0,
            relu: false,
            out_shape: [LATENT_DIM, 1, 1],
        }
    }

    #[allow(clippy::too_many_arguments)]
    const fn deconv(
        name: &'static str,
        c_in: usize,
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
        op: usize,
        out: usize,
        relu: bool,
    ) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Deconv,
            c_in,
            c_out,
            geom: ConvGeom::new(k, s, p),
            out_pad: op,
            relu,
            out_shape: [c_out, out, out],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.geom.kernel;
        match self.kind {
            LayerKind::Conv => vec![self.c_out, self.c_in, k, k],
            LayerKind::Deconv => vec![self.c_in, self.c_out, k, k],
            LayerKind::Dense => vec![self.c_out, self.c_in],
        }
    }

    fn fans(&self) -> (usize, usize) {
        let kk = self.geom.kernel * self.geom.kernel;
        (self.c_in * kk, self.c_out * kk)
    }

    /// Compact geometry string recorded in model manifests.
    pub fn describe(&self) -> String {
        let kind = match self.kind {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
            LayerKind::Deconv => "deconv",
        };
        format!(
            "{}:{}:{}>{}:k{}s{}p{}o{}:{}x{}x{}",
            self.name,
            kind,
            self.c_in,
            self.c_out,
            self.geom.kernel,
            self.geom.stride,
            self.geom.pad,
            self.out_pad,
            self.out_shape[0],
            self.out_shape[1],
            self.out_shape[2]
        )
    }
}

/// Encoder C1–C4, posterior heads F5 (mean) and F6 (log-variance), decoder
/// D8–D11. C1–C3 and D9–D11 use padding 1 so that 28 → 14 → 7 → 4 and back;
/// D10/D11 add one row/column of output padding to reach 14 and 28.
pub const LAYERS: [LayerSpec; 10] = [
    LayerSpec::conv("C1", 3, 64, 3, 2, 1, 14),
    LayerSpec::conv("C2", 64, 128, 3, 2, 1, 7),
    LayerSpec::conv("C3", 128, 256, 3, 2, 1, 4),
    LayerSpec::conv("C4", 256, 64, 4, 1, 0, 1),
    LayerSpec::dense("F5"),
    LayerSpec::dense("F6"),
    LayerSpec::deconv("D8", 64, 256, 4, 1, 0, 0, 4, true),
    LayerSpec::deconv("D9", 256, 128, 3, 2, 1, 0, 7, true),
    LayerSpec::deconv("D10", 128, 64, 3, 2, 1, 1, 14, true),
    LayerSpec::deconv("D11", 64, 3, 3, 2, 1, 1, 28, false),
];

pub const ENCODER: [usize; 4] = [0, 1, 2, 3];
pub const HEAD_MEAN: usize = 4;
pub const HEAD_LOGVAR: usize = 5;
pub const DECODER: [usize; 4] = [6, 7, 8, 9];

/// Encoder/decoder weights: `(weight, bias)` per row of [`LAYERS`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Network {
    pub fn glorot<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let layers = LAYERS
            .iter()
            .map(|s| {
                let (fi, fo) = s.fans();
                (Tensor::glorot(&s.weight_shape(), fi, fo, rng), Tensor::zeros(&[s.c_out]))
            })
            .collect();
        Network { layers }
    }

    pub fn zeros() -> Self {
        let layers = LAYERS
            .iter()
            .map(|s| (Tensor::zeros(&s.weight_shape()), Tensor::zeros(&[s.c_out])))
            .collect();
        Network { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != LAYERS.len() {
            return Err(dim_err!("network has {} layers, expected {}", self.layers.len(), LAYERS.len()));
        }
        for (spec, (w, b)) in LAYERS.iter().zip(&self.layers) {
            if w.shape() != spec.weight_shape().as_slice() || b.shape() != [spec.c_out] {
                return Err(dim_err!("layer {} has weight {:?} bias {:?}", spec.name, w.shape(), b.shape()));
            }
        }
        Ok(())
    }

    /// Leaves for every layer; `trainable[i]` selects params vs constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(usize) -> bool) -> BoundNetwork {
        let vars = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                if trainable(i) {
                    (g.param(w.clone()), g.param(b.clone()))
                } else {
                    (g.constant(w.clone()), g.constant(b.clone()))
                }
            })
            .collect();
        BoundNetwork { vars }
    }
}

/// Graph handles of a [`Network`].
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub vars: Vec<(Var, Var)>,
}

fn check_layer(spec: &LayerSpec, shape: &[usize]) -> Result<()> {
    if shape.len() < 2 || shape[1..] != spec.out_shape[..shape.len() - 1] {
        return Err(dim_err!(
            "layer {} produced {:?}, table says {:?}",
            spec.name,
            &shape[1..],
            spec.out_shape
        ));
    }
    Ok(())
}

fn apply_layer(g: &mut Graph, spec: &LayerSpec, (w, b): (Var, Var), h: Var) -> Result<Var> {
    let y = match spec.kind {
        LayerKind::Conv => g.conv2d(h, w, spec.geom)?,
        LayerKind::Deconv => g.conv2d_transpose(h, w, spec.geom, spec.out_pad)?,
        LayerKind::Dense => g.linear(h, w)?,
    };
    let y = g.add_bias(y, b)?;
    check_layer(spec, g.shape(y))?;
    Ok(if spec.relu { g.relu(y) } else { y })
}

impl BoundNetwork {
    /// `x: [N, 3, 28, 28]` → (posterior mean, raw log-variance), each `[N, 64]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let n = check_input(g.shape(x))?;
        let mut h = x;
        for i in ENCODER {
            h = apply_layer(g, &LAYERS[i], self.vars[i], h)?;
        }
        let flat = g.reshape(h, &[n, LATENT_DIM])?;
        let mu = apply_layer(g, &LAYERS[HEAD_MEAN], self.vars[HEAD_MEAN], flat)?;
        let logvar = apply_layer(g, &LAYERS[HEAD_LOGVAR], self.vars[HEAD_LOGVAR], flat)?;
        Ok((mu, logvar))
    }

    /// Encoder trunk and mean head only.
    pub fn encode_mean(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = check_input(g.shape(x))?;
        let mut h = x;
        for i in ENCODER {
            h = apply_layer(g, &LAYERS[i], self.vars[i], h)?;
        }
        let flat = g.reshape(h, &[n, LATENT_DIM])?;
        apply_layer(g, &LAYERS[HEAD_MEAN], self.vars[HEAD_MEAN], flat)
    }

    /// `z: [N, 64]` → reconstruction `[N, 3, 28, 28]`.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let n = match *g.shape(z) {
            [n, LATENT_DIM] => n,
            ref s => return Err(dim_err!("latent must be N×{LATENT_DIM}, got {s:?}")),
        };
        let mut h = g.reshape(z, &[n, LATENT_DIM, 1, 1])?;
        for i in DECODER {
            h = apply_layer(g, &LAYERS[i], self.vars[i], h)?;
        }
        Ok(h)
    }
}

fn check_input(shape: &[usize]) -> Result<usize> {
    match *shape {
        [n, 3, 28, 28] => Ok(n),
        _ => Err(dim_err!("encoder input must be N×3×28×28, got {shape:?}")),
    }
}

fn add_bias(t: &mut Tensor, b: &Tensor) {
    let c = b.len();
    let inner = t.len() / (t.shape()[0] * c).max(1);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / inner) % c];
    }
}

fn relu(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn run_layer(net: &Network, i: usize, h: &Tensor) -> Result<Tensor> {
    let spec = &LAYERS[i];
    let (w, b) = &net.layers[i];
    let mut y = match spec.kind {
        LayerKind::Conv => kernels::conv2d(h, w, spec.geom)?,
        LayerKind::Deconv => kernels::conv2d_transpose(h, w, spec.geom, spec.out_pad)?,
        LayerKind::Dense => kernels::linear(h, w)?,
    };
    add_bias(&mut y, b);
    check_layer(spec, y.shape())?;
    if spec.relu {
        relu(&mut y);
    }
    Ok(y)
}

impl Network {
    /// Inference-only encoder: `[N, 3, 28, 28]` → (mean, raw log-variance).
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = check_input(x.shape())?;
        let mut h = x.clone();
        for i in ENCODER {
            h = run_layer(self, i, &h)?;
        }
        let flat = h.reshape(&[n, LATENT_DIM])?;
        let mu = run_layer(self, HEAD_MEAN, &flat)?;
        let logvar = run_layer(self, HEAD_LOGVAR, &flat)?;
        mu.check_finite("encoder mean")?;
        logvar.check_finite("encoder log-variance")?;
        Ok((mu, logvar))
    }

    /// Inference-only decoder: `[N, 64]` → `[N, 3, 28, 28]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let n = match *z.shape() {
            [n, LATENT_DIM] => n,
            ref s => return Err(dim_err!("latent must be N×{LATENT_DIM}, got {s:?}")),
        };
        let mut h = z.clone().reshape(&[n, LATENT_DIM, 1, 1])?;
        for i in DECODER {
            h = run_layer(self, i, &h)?;
        }
        h.check_finite("decoder output")?;
        Ok(h)
    }
}
