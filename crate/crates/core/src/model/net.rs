use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BlockMode, ModelConfig};
use crate::blocks::{CbamBlock, ConvBnAct, ErrcBlock, InvertedResidualBlock, EXPANSION};
use crate::error::{Error, Result};
use crate::label::Prediction;
use crate::nn::{
    activation, Activation, ActivationKind, BackwardCtx, Conv2dSpec, Dense, Dropout, ForwardCtx, Mode, Module,
};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Layer name whose output Grad-CAM inspects unless told otherwise.
pub const DEFAULT_CAM_LAYER: &str = "stage3.errc";

const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Clone, Debug)]
enum Layer<T: Scalar> {
    Stem(ConvBnAct<T>),
    Ir(InvertedResidualBlock<T>),
    Errc(ErrcBlock<T>),
    Cbam(CbamBlock<T>),
    Act(Activation<T>),
}

macro_rules! each_layer {
    ($layer:expr, $l:ident => $body:expr) => {
        match $layer {
            Layer::Stem($l) => $body,
            Layer::Ir($l) => $body,
            Layer::Errc($l) => $body,
            Layer::Cbam($l) => $body,
            Layer::Act($l) => $body,
        }
    };
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        each_layer!(self, l => l.forward(x, ctx))
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        each_layer!(self, l => l.backward(grad, ctx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        each_layer!(self, l => l.visit_params(f))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        each_layer!(self, l => l.visit_params_mut(f))
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        each_layer!(self, l => l.visit_buffers_mut(f))
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        each_layer!(self, l => l.visit_buffers(f))
    }
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    name: String,
    layer: Layer<T>,
}

/// flatten → dropout → dense → ReLU → dropout → dense (logits).
#[derive(Clone, Debug)]
struct Head<T: Scalar> {
    drop1: Dropout<T>,
    fc1: Dense<T>,
    relu: Activation<T>,
    drop2: Dropout<T>,
    fc2: Dense<T>,
    input_dims: Option<Vec<usize>>,
    embedding: Option<Tensor<T>>,
}

impl<T: Scalar> Head<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        self.input_dims = Some(x.dims().to_vec());
        let y = self.drop1.forward(x.flatten(), ctx)?;
        let y = self.fc1.forward(y, ctx)?;
        let y = self.relu.forward(y, ctx)?;
        self.embedding = Some(y.clone());
        let y = self.drop2.forward(y, ctx)?;
        self.fc2.forward(y, ctx)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let dims = self.input_dims.clone().ok_or_else(|| crate::nn::missing_cache("head"))?;
        let g = self.fc2.backward(grad, ctx)?;
        let g = self.drop2.backward(g, ctx)?;
        let g = self.relu.backward(g, ctx)?;
        let g = self.fc1.backward(g, ctx)?;
        let g = self.drop1.backward(g, ctx)?;
        g.reshape(&dims)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// The five-block classifier: two Conv-BN-ReLU stems, three stages of
/// inverted residual → ERRC → CBAM → ReLU6, and a dense head producing two
/// logits (Group A, Group B).
#[derive(Clone, Debug)]
pub struct PinSiteNet<T: Scalar = f32> {
    config: ModelConfig,
    body: Vec<Node<T>>,
    head: Head<T>,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> PinSiteNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut body = Vec::new();
        let mut push = |name: String, layer: Layer<T>| body.push(Node { name, layer });

        let mut channels = 3;
        for (i, s) in config.stem.iter().enumerate() {
            let name = format!("stem{}", i + 1);
            let spec = Conv2dSpec::new(channels, s.out_channels, s.kernel).stride(s.stride).same();
            push(name.clone(), Layer::Stem(ConvBnAct::new(&name, spec, Some(ActivationKind::Relu), &mut rng)?));
            channels = s.out_channels;
        }
        for (i, st) in config.stages.iter().enumerate() {
            let stage = format!("stage{}", i + 1);
            let c = st.ir_out_channels;
            let ir = format!("{stage}.ir");
            push(ir.clone(), Layer::Ir(InvertedResidualBlock::new(&ir, channels, c, st.ir_stride, EXPANSION, &mut rng)?));
            let second = format!("{stage}.errc");
            let layer = match config.block_mode {
                BlockMode::Errc => Layer::Errc(ErrcBlock::new(&second, c, st.errc_channels, &mut rng)?),
                BlockMode::InvertedResidualOnly => {
                    Layer::Ir(InvertedResidualBlock::new(&second, c, st.errc_channels, 1, EXPANSION, &mut rng)?)
                }
            };
            push(second, layer);
            let cbam = format!("{stage}.cbam");
            push(cbam.clone(), Layer::Cbam(CbamBlock::new(&cbam, st.errc_channels, st.cbam_reduction, &mut rng)?));
            push(format!("{stage}.relu6"), Layer::Act(Activation::new(ActivationKind::Relu6)));
            channels = st.errc_channels;
        }

        let h = config.head;
        let head = Head {
            drop1: Dropout::new(h.dropout1)?,
            fc1: Dense::new("head.fc1", config.flatten_dim()?, h.hidden_units, &mut rng)?,
            relu: Activation::new(ActivationKind::Relu),
            drop2: Dropout::new(h.dropout2)?,
            fc2: Dense::new("head.fc2", h.hidden_units, h.num_classes, &mut rng)?,
            input_dims: None,
            embedding: None,
        };
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        Ok(Self {
            config,
            body,
            head,
            mode: Mode::Infer,
            dropout_rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Restarts the dropout mask stream.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self.dropout_rng.set_stream(DROPOUT_STREAM);
    }

    /// Body layer names in execution order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.body.iter().map(|n| n.name.as_str()).collect()
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.body
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::config(format!("unknown layer {name:?}; known: {}", self.layer_names().join(", "))))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        match x.dims() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            d => Err(Error::shape(format!("expected N×3×{s}×{s} input, got {d:?}"))),
        }
    }

    fn run(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx, record: Option<usize>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.check_input(&x)?;
        let mut y = x;
        let mut recorded = None;
        for (i, node) in self.body.iter_mut().enumerate() {
            y = node.layer.forward(y, ctx)?;
            if record == Some(i) {
                recorded = Some(y.clone());
            }
        }
        Ok((self.head.forward(y, ctx)?, recorded))
    }

    fn with_ctx<R>(&mut self, f: impl FnOnce(&mut Self, &mut ForwardCtx) -> Result<R>) -> Result<R> {
        let rng = std::mem::replace(&mut self.dropout_rng, ChaCha8Rng::seed_from_u64(0));
        let mut ctx = ForwardCtx { mode: self.mode, rng };
        let out = f(self, &mut ctx);
        self.dropout_rng = ctx.rng;
        out
    }

    /// Pre-softmax scores, `N×2`.
    pub fn forward_logits(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        self.with_ctx(|net, ctx| Ok(net.run(x, ctx, None)?.0))
    }

    /// Logits plus the output of the named body layer.
    pub fn forward_recording(&mut self, x: Tensor<T>, layer: &str) -> Result<(Tensor<T>, Tensor<T>)> {
        let idx = self.layer_index(layer)?;
        self.with_ctx(|net, ctx| {
            let (logits, rec) = net.run(x, ctx, Some(idx))?;
            Ok((logits, rec.expect("recorded layer ran")))
        })
    }

    /// Softmax rows `[p_groupA, p_groupB]`.
    pub fn probabilities(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.forward_logits(x)?;
        activation(ActivationKind::Softmax, &logits)
    }

    /// Backpropagates a logit gradient to the network input, accumulating
    /// parameter gradients.
    pub fn backward_logits(&mut self, dlogits: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let inner = BackwardCtx {
            skip_input_grad: false,
            ..ctx
        };
        let mut g = self.head.backward(dlogits, inner)?;
        for (i, node) in self.body.iter_mut().enumerate().rev() {
            g = node.layer.backward(g, if i == 0 { ctx } else { inner })?;
        }
        Ok(g)
    }

    /// Gradient of the logits w.r.t. the output of the named body layer.
    pub fn backward_to(&mut self, dlogits: Tensor<T>, layer: &str, guided: bool) -> Result<Tensor<T>> {
        let idx = self.layer_index(layer)?;
        let ctx = BackwardCtx {
            guided,
            skip_input_grad: false,
        };
        let mut g = self.head.backward(dlogits, ctx)?;
        for node in self.body[idx + 1..].iter_mut().rev() {
            g = node.layer.backward(g, ctx)?;
        }
        Ok(g)
    }

    fn require_infer(&self, what: &str) -> Result<()> {
        if self.mode != Mode::Infer {
            return Err(Error::Mode(format!("{what} needs an infer-mode network")));
        }
        Ok(())
    }

    pub fn predict(&mut self, batch: Tensor<T>, threshold: f64) -> Result<Vec<Prediction>> {
        self.require_infer("predict")?;
        let probs = self.probabilities(batch)?;
        probs
            .data()
            .chunks_exact(2)
            .map(|row| Prediction::from_probs([row[0].as_f64(), row[1].as_f64()], threshold))
            .collect()
    }

    /// Hidden-layer activations after its ReLU, before the second dropout;
    /// `N×hidden_units`.
    pub fn extract_embedding(&mut self, batch: Tensor<T>) -> Result<Tensor<T>> {
        self.require_infer("extract_embedding")?;
        self.forward_logits(batch)?;
        Ok(self.head.embedding.take().expect("head ran"))
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    /// Every stored array (parameters, then batch-norm statistics) by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        self.visit_buffers(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn named_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_params_mut(&mut |p| f(&p.name.clone(), &mut p.value));
        self.visit_buffers_mut(f);
    }
}

impl<T: Scalar> Module<T> for PinSiteNet<T> {
    /// Logits for the given context (its mode overrides the network's).
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        Ok(self.run(x, ctx, None)?.0)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        self.backward_logits(grad, ctx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for n in &self.body {
            n.layer.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for n in &mut self.body {
            n.layer.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for n in &mut self.body {
            n.layer.visit_buffers_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for n in &self.body {
            n.layer.visit_buffers(f);
        }
    }
}
