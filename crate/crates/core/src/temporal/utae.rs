use latefuse_tensor::nn::{BatchNorm, Conv2d, ConvTranspose2d, GroupNorm, Mode};
use latefuse_tensor::{impl_params, ConvOpts, HasParams, PadMode, Param, Result, Scalar, Var};
use rand::Rng;

pub enum Norm<T> {
    Group(GroupNorm<T>),
    Batch(BatchNorm<T>),
    None,
}

impl<T: Scalar> HasParams<T> for Norm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        match self {
            Norm::Group(n) => n.visit(prefix, f),
            Norm::Batch(n) => n.visit(prefix, f),
            Norm::None => {}
        }
    }
}

impl<T: Scalar> Norm<T> {
    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        match self {
            Norm::Group(n) => n.forward(x),
            Norm::Batch(n) => n.forward(x, mode),
            Norm::None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum NormKind {
    Group(usize),
    Batch,
}

impl NormKind {
    fn build<T: Scalar>(self, c: usize) -> Norm<T> {
        match self {
            NormKind::Group(g) => Norm::Group(GroupNorm::new(g, c)),
            NormKind::Batch => Norm::Batch(BatchNorm::new(c)),
        }
    }
}

/// Conv, norm, ReLU.
pub struct ConvLayer<T> {
    pub conv: Conv2d<T>,
    pub norm: Norm<T>,
    relu: bool,
}
impl_params!(ConvLayer { conv, norm });

impl<T: Scalar> ConvLayer<T> {
    pub fn new(cin: usize, cout: usize, k: usize, opts: ConvOpts, norm: NormKind, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, opts, true, rng),
            norm: norm.build(cout),
            relu: true,
        }
    }

    fn plain(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, reflect3(), true, rng),
            norm: Norm::None,
            relu: false,
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = self.norm.forward(&self.conv.forward(x)?, mode)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}

fn reflect3() -> ConvOpts {
    ConvOpts::same(3).pad_mode(PadMode::Reflect)
}

/// Strided conv, then a conv and a residual conv.
pub struct DownBlock<T> {
    pub down: ConvLayer<T>,
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}
impl_params!(DownBlock { down, conv1, conv2 });

impl<T: Scalar> DownBlock<T> {
    pub fn new(cin: usize, cout: usize, norm: NormKind, rng: &mut impl Rng) -> Self {
        let strided = ConvOpts::default().stride(2).padding(1).pad_mode(PadMode::Reflect);
        Self {
            down: ConvLayer::new(cin, cin, 4, strided, norm, rng),
            conv1: ConvLayer::new(cin, cout, 3, reflect3(), norm, rng),
            conv2: ConvLayer::new(cout, cout, 3, reflect3(), norm, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = self.conv1.forward(&self.down.forward(x, mode)?, mode)?;
        y.add(&self.conv2.forward(&y, mode)?)
    }
}

/// Transposed-conv upsampling merged with a projected skip map.
pub struct UpBlock<T> {
    pub up: ConvTranspose2d<T>,
    pub up_norm: BatchNorm<T>,
    pub skip_conv: Conv2d<T>,
    pub skip_norm: BatchNorm<T>,
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}
impl_params!(UpBlock { up, up_norm, skip_conv, skip_norm, conv1, conv2 });

impl<T: Scalar> UpBlock<T> {
    pub fn new(cin: usize, cout: usize, skip: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: ConvTranspose2d::new(cin, cout, 4, 2, 1, true, rng),
            up_norm: BatchNorm::new(cout),
            skip_conv: Conv2d::new(skip, skip, 1, ConvOpts::default(), true, rng),
            skip_norm: BatchNorm::new(skip),
            conv1: ConvLayer::new(cout + skip, cout, 3, reflect3(), NormKind::Batch, rng),
            conv2: ConvLayer::new(cout, cout, 3, reflect3(), NormKind::Batch, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>, skip: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let up = self.up_norm.forward(&self.up.forward(x)?, mode)?.relu();
        let skip = self.skip_norm.forward(&self.skip_conv.forward(skip)?, mode)?.relu();
        let y = self.conv1.forward(&Var::cat(&[up, skip], 1)?, mode)?;
        y.add(&self.conv2.forward(&y, mode)?)
    }
}

/// Output head: conv-BN-ReLU layers, then a plain conv to class logits.
pub struct Head<T> {
    pub hidden: Vec<ConvLayer<T>>,
    pub out: ConvLayer<T>,
}
impl_params!(Head { hidden, out });

impl<T: Scalar> Head<T> {
    pub fn new(cin: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut c = cin;
        let mut hidden = Vec::new();
        for &w in &widths[..widths.len() - 1] {
            hidden.push(ConvLayer::new(c, w, 3, reflect3(), NormKind::Batch, rng));
            c = w;
        }
        Self {
            hidden,
            out: ConvLayer::plain(c, widths[widths.len() - 1], rng),
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let mut y = x.clone();
        for l in &self.hidden {
            y = l.forward(&y, mode)?;
        }
        self.out.forward(&y, mode)
    }
}
