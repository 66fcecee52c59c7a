use ndarray::{Array1, Array4};
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Negative-side slope of every hidden activation.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Leaky,
    Identity,
}

fn uniform_weights<R: Rng>(shape: (usize, usize, usize, usize), fan_in: usize, rng: &mut R) -> Array4<f32> {
    let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f32)).sqrt();
    Array4::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// Same-padded convolution (`pad = k / 2`) followed by an optional leaky
/// rectifier.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub act: Activation,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        act: Activation,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let w = store.add(
            &format!("{name}.w"),
            uniform_weights((cout, cin, kernel.0, kernel.1), fan_in, rng).into_dyn(),
        );
        let b = store.add(&format!("{name}.b"), Array1::<f32>::zeros(cout).into_dyn());
        Self {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.conv2d(x, self.w, self.b, self.stride, (self.kernel.0 / 2, self.kernel.1 / 2));
        match self.act {
            Activation::Leaky => g.leaky_relu(y, LEAKY_SLOPE),
            Activation::Identity => y,
        }
    }
}

/// Stride-2 transposed convolution doubling the spatial size.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub act: Activation,
}

impl Deconv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        act: Activation,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            &format!("{name}.w"),
            uniform_weights((cin, cout, kernel, kernel), fan_in, rng).into_dyn(),
        );
        let b = store.add(&format!("{name}.b"), Array1::<f32>::zeros(cout).into_dyn());
        Self { w, b, kernel, act }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let p = self.kernel / 2;
        let y = g.deconv2d(x, self.w, self.b, 2, (p, p));
        match self.act {
            Activation::Leaky => g.leaky_relu(y, LEAKY_SLOPE),
            Activation::Identity => y,
        }
    }
}

/// Residual block `[3x3, 1x1, 3x3]` with a 1x1 projection on the skip path
/// when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub convs: [Conv2d; 3],
    pub proj: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let a = Activation::Leaky;
        let convs = [
            Conv2d::new(store, rng, &format!("{name}.c0"), cin, cout, (3, 3), 1, a),
            Conv2d::new(store, rng, &format!("{name}.c1"), cout, cout, (1, 1), 1, a),
            Conv2d::new(store, rng, &format!("{name}.c2"), cout, cout, (3, 3), 1, a),
        ];
        let proj = (cin != cout).then(|| {
            Conv2d::new(store, rng, &format!("{name}.proj"), cin, cout, (1, 1), 1, Activation::Identity)
        });
        Self { convs, proj }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h);
        }
        let skip = match &self.proj {
            Some(p) => p.forward(g, x),
            None => x,
        };
        g.add(h, skip)
    }
}

/// A plain chain of convolutions.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Conv2d>,
}

impl Sequential {
    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for l in &self.layers {
            x = l.forward(g, x);
        }
        x
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(0)
    }
}
