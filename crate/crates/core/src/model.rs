//! The dual-path network: a conv-BN-act backbone, an expansion block, an
//! optional EMA-tracked copy of that block, an optional multi-scale fusion
//! module (parallel 1x1/3x3/5x5 convolutions, summed and projected), and a
//! BN/linear/ReLU/dropout/linear classification head.
//!
//! Parameters are grouped and ordered (backbone, expansion, momentum,
//! fusion, head); the momentum group mirrors the expansion group tensor for
//! tensor and is never touched by the optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Nonlinearity used by backbone/expansion/fusion stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{}'", other))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Channel widths of the stride-2 backbone stages; the last entry must
    /// equal `c_pre`.
    pub backbone_stage_widths: Vec<usize>,
    /// Channels entering the expansion block.
    pub c_pre: usize,
    /// Channels produced by the expansion block.
    pub c_out: usize,
    /// Fusion branch reduction: each branch maps c_out -> c_out/r.
    pub fusion_reduction: usize,
    pub head_hidden: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub activation: Activation,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Apply BN + activation after the fusion projection. Turning this off
    /// (together with the zero-initialized biases) makes the fusion module a
    /// linear map, which the linearity checks rely on.
    pub fusion_nonlinearity: bool,
    pub use_fusion: bool,
    pub use_momentum: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            backbone_stage_widths: vec![16, 32],
            c_pre: 32,
            c_out: 64,
            fusion_reduction: 4,
            head_hidden: 512,
            dropout_rate: 0.3,
            num_classes: 14,
            activation: Activation::Silu,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            fusion_nonlinearity: true,
            use_fusion: true,
            use_momentum: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.input_height == 0
            || self.input_width == 0
            || self.num_classes == 0
            || self.head_hidden == 0
        {
            return Err(Error::Config("model: extents must be positive".into()));
        }
        if self.backbone_stage_widths.is_empty() {
            return Err(Error::Config("model: need at least one backbone stage".into()));
        }
        if self.backbone_stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("model: stage widths must be positive".into()));
        }
        if *self.backbone_stage_widths.last().unwrap() != self.c_pre {
            return Err(Error::Config(format!(
                "model: last backbone width {} must equal c_pre {}",
                self.backbone_stage_widths.last().unwrap(),
                self.c_pre
            )));
        }
        if self.fusion_reduction == 0 {
            return Err(Error::Config("model: fusion_reduction must be positive".into()));
        }
        if self.c_out % self.fusion_reduction != 0 {
            return Err(Error::Config(format!(
                "model: c_out {} not divisible by fusion_reduction {}",
                self.c_out, self.fusion_reduction
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "model: dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::Config("model: bn_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("model: bn_momentum must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Spatial size after the backbone (each stage is a stride-2 conv).
    pub fn backbone_out_size(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in &self.backbone_stage_widths {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }
}

// ── primitive layers ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    w: Var,
    b: Var,
}

impl Conv {
    fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let w = Tensor::from_vec(&[cout, cin, k, k], data)
            .expect("conv init shape")
            .with_requires_grad();
        let b = Tensor::zeros(&[cout]).with_requires_grad();
        Conv {
            w,
            b,
            stride,
            padding,
        }
    }

    fn bind(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            w: g.leaf(self.w.clone(), self.w.requires_grad),
            b: g.leaf(self.b.clone(), self.b.requires_grad),
        }
    }

    fn forward(&self, g: &mut Graph, vars: ConvVars, x: Var) -> Result<Var> {
        g.conv2d(x, vars.w, Some(vars.b), self.stride, self.padding)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    fn flops(&self, ho: usize, wo: usize) -> u64 {
        let [cout, cin, kh, kw] = self.w.shape() else {
            unreachable!()
        };
        (2 * cout * cin * kh * kw * ho * wo) as u64
    }
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: Tensor,
    beta: Tensor,
    run_mean: Tensor,
    run_var: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    gamma: Var,
    beta: Var,
}

impl Bn {
    fn init(c: usize) -> Self {
        Bn {
            gamma: Tensor::full(&[c], 1.0).with_requires_grad(),
            beta: Tensor::zeros(&[c]).with_requires_grad(),
            run_mean: Tensor::zeros(&[c]),
            run_var: Tensor::full(&[c], 1.0),
        }
    }

    fn bind(&self, g: &mut Graph) -> BnVars {
        BnVars {
            gamma: g.leaf(self.gamma.clone(), self.gamma.requires_grad),
            beta: g.leaf(self.beta.clone(), self.beta.requires_grad),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        g: &mut Graph,
        vars: BnVars,
        x: Var,
        mode: Mode,
        update_stats: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        g.batch_norm(
            x,
            vars.gamma,
            vars.beta,
            &mut self.run_mean,
            &mut self.run_var,
            mode,
            update_stats,
            eps,
            momentum,
        )
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Tensor> {
        vec![&self.run_mean, &self.run_var]
    }
}

#[derive(Debug, Clone)]
struct LinearLayer {
    w: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    w: Var,
    b: Var,
}

impl LinearLayer {
    fn init(fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / fin as f64).sqrt();
        let data = (0..fout * fin).map(|_| rng.gen_range(-bound..bound)).collect();
        LinearLayer {
            w: Tensor::from_vec(&[fout, fin], data)
                .expect("linear init shape")
                .with_requires_grad(),
            b: Tensor::zeros(&[fout]).with_requires_grad(),
        }
    }

    fn bind(&self, g: &mut Graph) -> LinearVars {
        LinearVars {
            w: g.leaf(self.w.clone(), self.w.requires_grad),
            b: g.leaf(self.b.clone(), self.b.requires_grad),
        }
    }

    fn forward(&self, g: &mut Graph, vars: LinearVars, x: Var) -> Result<Var> {
        g.linear(x, vars.w, vars.b)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    fn flops(&self) -> u64 {
        let [fout, fin] = self.w.shape() else {
            unreachable!()
        };
        (2 * fout * fin) as u64
    }
}

/// conv -> BN -> activation; the building block of backbone and expansion.
#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: Conv,
    bn: Bn,
    act: Activation,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBnActVars {
    conv: ConvVars,
    bn: BnVars,
}

impl ConvBnAct {
    fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBnAct {
            conv: Conv::init(cin, cout, k, stride, padding, rng),
            bn: Bn::init(cout),
            act,
        }
    }

    fn bind(&self, g: &mut Graph) -> ConvBnActVars {
        ConvBnActVars {
            conv: self.conv.bind(g),
            bn: self.bn.bind(g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        g: &mut Graph,
        vars: ConvBnActVars,
        x: Var,
        mode: Mode,
        update_stats: bool,
        eps: f64,
        bn_momentum: f64,
    ) -> Result<Var> {
        let y = self.conv.forward(g, vars.conv, x)?;
        let y = self
            .bn
            .forward(g, vars.bn, y, mode, update_stats, eps, bn_momentum)?;
        Ok(apply_act(g, self.act, y))
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Tensor> {
        self.bn.buffers()
    }

    /// All state tensors (params then buffers), the EMA pairing order.
    fn state(&self) -> Vec<&Tensor> {
        let mut v = self.params();
        v.extend(self.buffers());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv.w,
            &mut self.conv.b,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.bn.run_mean,
            &mut self.bn.run_var,
        ]
    }

    /// Deep copy with gradient tracking turned off (the momentum twin).
    fn frozen_copy(&self) -> Self {
        let mut copy = self.clone();
        for t in copy.state_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
        copy
    }
}

fn apply_act(g: &mut Graph, act: Activation, x: Var) -> Var {
    match act {
        Activation::Silu => g.silu(x),
        Activation::Relu => g.relu(x),
    }
}

/// Parallel 1x1/3x3/5x5 branches, elementwise sum, 1x1 projection back to
/// c_out, optionally followed by BN + activation.
#[derive(Debug, Clone)]
struct FusionModule {
    branch1: Conv,
    branch3: Conv,
    branch5: Conv,
    proj: Conv,
    post: Option<Bn>,
    act: Activation,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    branch1: ConvVars,
    branch3: ConvVars,
    branch5: ConvVars,
    proj: ConvVars,
    post: Option<BnVars>,
}

impl FusionModule {
    fn init(
        c_out: usize,
        reduction: usize,
        nonlinear: bool,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c_mid = c_out / reduction;
        FusionModule {
            branch1: Conv::init(c_out, c_mid, 1, 1, 0, rng),
            branch3: Conv::init(c_out, c_mid, 3, 1, 1, rng),
            branch5: Conv::init(c_out, c_mid, 5, 1, 2, rng),
            proj: Conv::init(c_mid, c_out, 1, 1, 0, rng),
            post: nonlinear.then(|| Bn::init(c_out)),
            act,
        }
    }

    fn bind(&self, g: &mut Graph) -> FusionVars {
        FusionVars {
            branch1: self.branch1.bind(g),
            branch3: self.branch3.bind(g),
            branch5: self.branch5.bind(g),
            proj: self.proj.bind(g),
            post: self.post.as_ref().map(|bn| bn.bind(g)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        g: &mut Graph,
        vars: FusionVars,
        h: Var,
        mode: Mode,
        update_stats: bool,
        eps: f64,
        bn_momentum: f64,
    ) -> Result<Var> {
        let y1 = self.branch1.forward(g, vars.branch1, h)?;
        let y3 = self.branch3.forward(g, vars.branch3, h)?;
        let y5 = self.branch5.forward(g, vars.branch5, h)?;
        let summed = g.add(y1, y3)?;
        let summed = g.add(summed, y5)?;
        let mut z = self.proj.forward(g, vars.proj, summed)?;
        if let Some(bn) = &mut self.post {
            let bn_vars = vars.post.expect("fusion post vars");
            z = bn.forward(g, bn_vars, z, mode, update_stats, eps, bn_momentum)?;
            z = apply_act(g, self.act, z);
        }
        Ok(z)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.branch1.params();
        v.extend(self.branch3.params());
        v.extend(self.branch5.params());
        v.extend(self.proj.params());
        if let Some(bn) = &self.post {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.branch1.params_mut();
        v.extend(self.branch3.params_mut());
        v.extend(self.branch5.params_mut());
        v.extend(self.proj.params_mut());
        if let Some(bn) = &mut self.post {
            v.extend(bn.params_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<&Tensor> {
        self.post.as_ref().map(|bn| bn.buffers()).unwrap_or_default()
    }
}

/// BN -> linear -> ReLU -> dropout -> linear, producing raw logits.
#[derive(Debug, Clone)]
struct Head {
    bn: Bn,
    fc1: LinearLayer,
    fc2: LinearLayer,
    dropout_rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    bn: BnVars,
    fc1: LinearVars,
    fc2: LinearVars,
}

impl Head {
    fn init(
        c_out: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Head {
            bn: Bn::init(c_out),
            fc1: LinearLayer::init(c_out, hidden, rng),
            fc2: LinearLayer::init(hidden, classes, rng),
            dropout_rate: dropout,
        }
    }

    fn bind(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            bn: self.bn.bind(g),
            fc1: self.fc1.bind(g),
            fc2: self.fc2.bind(g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        g: &mut Graph,
        vars: HeadVars,
        zhat: Var,
        mode: Mode,
        update_stats: bool,
        eps: f64,
        bn_momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let y = self
            .bn
            .forward(g, vars.bn, zhat, mode, update_stats, eps, bn_momentum)?;
        let y = self.fc1.forward(g, vars.fc1, y)?;
        let y = g.relu(y);
        let y = g.dropout(y, self.dropout_rate, mode, rng)?;
        self.fc2.forward(g, vars.fc2, y)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.bn.params();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.bn.params_mut();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

// ── the assembled model ─────────────────────────────────────────────────

/// Named parameter groups, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Backbone,
    Expansion,
    Momentum,
    Fusion,
    Head,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] = [
        GroupKind::Backbone,
        GroupKind::Expansion,
        GroupKind::Momentum,
        GroupKind::Fusion,
        GroupKind::Head,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GroupKind::Backbone => "backbone",
            GroupKind::Expansion => "expansion",
            GroupKind::Momentum => "momentum",
            GroupKind::Fusion => "fusion",
            GroupKind::Head => "head",
        }
    }
}

/// The full dual-path network.
pub struct ModelGraph {
    pub config: ModelConfig,
    backbone: Vec<ConvBnAct>,
    expansion: ConvBnAct,
    momentum: Option<ConvBnAct>,
    fusion: Option<FusionModule>,
    head: Head,
}

/// Leaf handles for one bound forward pass.
pub struct ModelVars {
    backbone: Vec<ConvBnActVars>,
    expansion: ConvBnActVars,
    momentum: Option<ConvBnActVars>,
    fusion: Option<FusionVars>,
    head: HeadVars,
}

/// Build the network. The momentum block, when enabled, starts as an exact
/// copy of the expansion block. Initialization draws come from per-group
/// streams of `seed`, so shared groups initialize identically across
/// ablation variants.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelGraph> {
    config.validate()?;
    let act = config.activation;

    let mut rng = stream_rng(seed, Stream::Init(0));
    let mut backbone = Vec::with_capacity(config.backbone_stage_widths.len());
    let mut cin = config.input_channels;
    for &width in &config.backbone_stage_widths {
        backbone.push(ConvBnAct::init(cin, width, 3, 2, 1, act, &mut rng));
        cin = width;
    }

    let mut rng = stream_rng(seed, Stream::Init(1));
    let expansion = ConvBnAct::init(config.c_pre, config.c_out, 3, 1, 1, act, &mut rng);
    let momentum = config.use_momentum.then(|| expansion.frozen_copy());

    let fusion = if config.use_fusion {
        let mut rng = stream_rng(seed, Stream::Init(2));
        Some(FusionModule::init(
            config.c_out,
            config.fusion_reduction,
            config.fusion_nonlinearity,
            act,
            &mut rng,
        ))
    } else {
        None
    };

    let mut rng = stream_rng(seed, Stream::Init(3));
    let head = Head::init(
        config.c_out,
        config.head_hidden,
        config.num_classes,
        config.dropout_rate,
        &mut rng,
    );

    Ok(ModelGraph {
        config: config.clone(),
        backbone,
        expansion,
        momentum,
        fusion,
        head,
    })
}

impl ModelGraph {
    pub fn momentum_enabled(&self) -> bool {
        self.momentum.is_some()
    }

    pub fn fusion_enabled(&self) -> bool {
        self.fusion.is_some()
    }

    /// Register every parameter as a graph leaf (momentum leaves untracked).
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            backbone: self.backbone.iter().map(|l| l.bind(g)).collect(),
            expansion: self.expansion.bind(g),
            momentum: self.momentum.as_ref().map(|l| l.bind(g)),
            fusion: self.fusion.as_ref().map(|f| f.bind(g)),
            head: self.head.bind(g),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels
            || h != self.config.input_height
            || w != self.config.input_width
        {
            return Err(Error::Dimension(format!(
                "model: input [{},{},{}] does not match config [{},{},{}]",
                c,
                h,
                w,
                self.config.input_channels,
                self.config.input_height,
                self.config.input_width
            )));
        }
        Ok(())
    }

    /// Backbone stages: x[N,3,H,W] -> x1[N,c_pre,H',W'].
    pub fn forward_backbone(
        &mut self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.check_input(g.value(x))?;
        let (eps, mom) = (self.config.bn_eps, self.config.bn_momentum);
        let update = mode == Mode::Train;
        let mut y = x;
        for (layer, lv) in self.backbone.iter_mut().zip(&vars.backbone) {
            y = layer.forward(g, *lv, y, mode, update, eps, mom)?;
        }
        Ok(y)
    }

    /// Expansion block: x1 -> h[N,c_out,H'',W''].
    pub fn forward_expansion(
        &mut self,
        g: &mut Graph,
        vars: &ModelVars,
        x1: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (eps, mom) = (self.config.bn_eps, self.config.bn_momentum);
        let update = mode == Mode::Train;
        self.expansion
            .forward(g, vars.expansion, x1, mode, update, eps, mom)
    }

    /// EMA-tracked twin of the expansion block: x1 -> z_ema. The twin's BN
    /// normalizes like the live block but never updates its running stats
    /// from the batch; those are EMA-tracked instead.
    pub fn forward_momentum(
        &mut self,
        g: &mut Graph,
        vars: &ModelVars,
        x1: Var,
        mode: Mode,
        stop_gradient: bool,
    ) -> Result<Var> {
        let (eps, mom) = (self.config.bn_eps, self.config.bn_momentum);
        let block = self
            .momentum
            .as_mut()
            .ok_or_else(|| Error::Usage("model: momentum branch not enabled".into()))?;
        let mvars = vars.momentum.as_ref().expect("momentum vars");
        let input = if stop_gradient { g.detach(x1) } else { x1 };
        block.forward(g, *mvars, input, mode, false, eps, mom)
    }

    /// Multi-scale fusion: h -> z_att (same shape).
    pub fn forward_fusion(
        &mut self,
        g: &mut Graph,
        vars: &ModelVars,
        h: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (eps, mom) = (self.config.bn_eps, self.config.bn_momentum);
        let update = mode == Mode::Train;
        let module = self
            .fusion
            .as_mut()
            .ok_or_else(|| Error::Usage("model: fusion module not enabled".into()))?;
        let fvars = vars.fusion.as_ref().expect("fusion vars");
        module.forward(g, *fvars, h, mode, update, eps, mom)
    }

    /// Whole network: x -> logits[N,K].
    ///
    /// z_ema comes from the momentum twin when enabled, otherwise it is the
    /// live expansion output itself; z = z_att + z_ema when fusion is
    /// enabled, else z_ema alone; logits = head(GAP(z)).
    pub fn forward_full(
        &mut self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
        stop_gradient_momentum: bool,
    ) -> Result<Var> {
        let x1 = self.forward_backbone(g, vars, x, mode)?;
        let h = self.forward_expansion(g, vars, x1, mode)?;
        let z_ema = if self.momentum.is_some() {
            self.forward_momentum(g, vars, x1, mode, stop_gradient_momentum)?
        } else {
            h
        };
        let z = if self.fusion.is_some() {
            let z_att = self.forward_fusion(g, vars, h, mode)?;
            g.add(z_att, z_ema)?
        } else {
            z_ema
        };
        let zhat = g.global_avg_pool(z)?;
        let (eps, mom) = (self.config.bn_eps, self.config.bn_momentum);
        let update = mode == Mode::Train;
        self.head
            .forward(g, vars.head, zhat, mode, update, eps, mom, dropout_rng)
    }

    /// Pull gradients off the tape into the parameter tensors' grad buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &ModelVars) -> Result<()> {
        for (tensor, var) in self.paired_trainables(vars) {
            if let Some(grad) = g.grad_data(var) {
                tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.trainable_params_mut() {
            t.zero_grad();
        }
    }

    fn paired_trainables<'a>(&'a mut self, vars: &ModelVars) -> Vec<(&'a mut Tensor, Var)> {
        let mut out: Vec<(&mut Tensor, Var)> = Vec::new();
        for (layer, lv) in self.backbone.iter_mut().zip(&vars.backbone) {
            out.extend(layer.params_mut().into_iter().zip(cba_vars(lv)));
        }
        out.extend(
            self.expansion
                .params_mut()
                .into_iter()
                .zip(cba_vars(&vars.expansion)),
        );
        if let (Some(f), Some(fv)) = (&mut self.fusion, &vars.fusion) {
            out.extend(f.params_mut().into_iter().zip(fusion_vars(fv)));
        }
        out.extend(
            self.head
                .params_mut()
                .into_iter()
                .zip(head_vars(&vars.head)),
        );
        out
    }

    /// Trainable parameters in group order (momentum excluded by design).
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.backbone {
            out.extend(layer.params_mut());
        }
        out.extend(self.expansion.params_mut());
        if let Some(f) = &mut self.fusion {
            out.extend(f.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Parameter tensors of one group.
    pub fn group_params(&self, kind: GroupKind) -> Vec<&Tensor> {
        match kind {
            GroupKind::Backbone => self.backbone.iter().flat_map(|l| l.params()).collect(),
            GroupKind::Expansion => self.expansion.params(),
            GroupKind::Momentum => self.momentum.as_ref().map(|l| l.params()).unwrap_or_default(),
            GroupKind::Fusion => self.fusion.as_ref().map(|f| f.params()).unwrap_or_default(),
            GroupKind::Head => self.head.params(),
        }
    }

    /// Mutable parameter tensors of one group (no buffers).
    pub fn group_params_mut(&mut self, kind: GroupKind) -> Vec<&mut Tensor> {
        match kind {
            GroupKind::Backbone => self
                .backbone
                .iter_mut()
                .flat_map(|l| l.params_mut())
                .collect(),
            GroupKind::Expansion => self.expansion.params_mut(),
            GroupKind::Momentum => self
                .momentum
                .as_mut()
                .map(|l| l.params_mut())
                .unwrap_or_default(),
            GroupKind::Fusion => self
                .fusion
                .as_mut()
                .map(|f| f.params_mut())
                .unwrap_or_default(),
            GroupKind::Head => self.head.params_mut(),
        }
    }

    fn all_buffers(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        for l in &self.backbone {
            v.extend(l.buffers());
        }
        v.extend(self.expansion.buffers());
        if let Some(m) = &self.momentum {
            v.extend(m.buffers());
        }
        if let Some(f) = &self.fusion {
            v.extend(f.buffers());
        }
        v.extend(self.head.bn.buffers());
        v
    }

    fn all_buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.backbone {
            v.extend([&mut l.bn.run_mean, &mut l.bn.run_var]);
        }
        v.extend([
            &mut self.expansion.bn.run_mean,
            &mut self.expansion.bn.run_var,
        ]);
        if let Some(m) = &mut self.momentum {
            v.extend([&mut m.bn.run_mean, &mut m.bn.run_var]);
        }
        if let Some(f) = &mut self.fusion {
            if let Some(bn) = &mut f.post {
                v.extend([&mut bn.run_mean, &mut bn.run_var]);
            }
        }
        v.extend([&mut self.head.bn.run_mean, &mut self.head.bn.run_var]);
        v
    }

    /// Copies of every BN running-stat buffer, in a fixed order.
    pub fn buffers_snapshot(&self) -> Vec<Vec<f64>> {
        self.all_buffers().iter().map(|t| t.data().to_vec()).collect()
    }

    /// Restore buffers captured by [`ModelGraph::buffers_snapshot`].
    pub fn buffers_restore(&mut self, snapshot: &[Vec<f64>]) {
        for (t, s) in self.all_buffers_mut().into_iter().zip(snapshot) {
            t.data_mut().copy_from_slice(s);
        }
    }

    /// Parameters plus buffers of one group, checkpoint order.
    pub fn group_state(&self, kind: GroupKind) -> Vec<&Tensor> {
        match kind {
            GroupKind::Backbone => {
                let mut v = Vec::new();
                for l in &self.backbone {
                    v.extend(l.params());
                    v.extend(l.buffers());
                }
                v
            }
            GroupKind::Expansion => self.expansion.state(),
            GroupKind::Momentum => self.momentum.as_ref().map(|l| l.state()).unwrap_or_default(),
            GroupKind::Fusion => {
                let mut v = self.fusion.as_ref().map(|f| f.params()).unwrap_or_default();
                if let Some(f) = &self.fusion {
                    v.extend(f.buffers());
                }
                v
            }
            GroupKind::Head => {
                let mut v = self.head.params();
                v.extend(self.head.bn.buffers());
                v
            }
        }
    }

    pub fn group_state_mut(&mut self, kind: GroupKind) -> Vec<&mut Tensor> {
        match kind {
            GroupKind::Backbone => {
                let mut v = Vec::new();
                for l in &mut self.backbone {
                    v.extend(l.state_mut());
                }
                v
            }
            GroupKind::Expansion => self.expansion.state_mut(),
            GroupKind::Momentum => self
                .momentum
                .as_mut()
                .map(|l| l.state_mut())
                .unwrap_or_default(),
            GroupKind::Fusion => match &mut self.fusion {
                Some(f) => {
                    let mut v = f.branch1.params_mut();
                    v.extend(f.branch3.params_mut());
                    v.extend(f.branch5.params_mut());
                    v.extend(f.proj.params_mut());
                    if let Some(bn) = &mut f.post {
                        v.extend([
                            &mut bn.gamma,
                            &mut bn.beta,
                            &mut bn.run_mean,
                            &mut bn.run_var,
                        ]);
                    }
                    v
                }
                None => Vec::new(),
            },
            GroupKind::Head => {
                let head = &mut self.head;
                let mut v: Vec<&mut Tensor> = vec![&mut head.bn.gamma, &mut head.bn.beta];
                v.extend(head.fc1.params_mut());
                v.extend(head.fc2.params_mut());
                v.extend([&mut head.bn.run_mean, &mut head.bn.run_var]);
                v
            }
        }
    }

    /// (expansion, momentum) state pairs for the EMA update, params then
    /// buffers (running BN stats are EMA-tracked too).
    pub fn ema_pairs(&mut self) -> Option<Vec<(&Tensor, &mut Tensor)>> {
        let momentum = self.momentum.as_mut()?;
        let theta: Vec<&Tensor> = vec![
            &self.expansion.conv.w,
            &self.expansion.conv.b,
            &self.expansion.bn.gamma,
            &self.expansion.bn.beta,
            &self.expansion.bn.run_mean,
            &self.expansion.bn.run_var,
        ];
        let eps_tensors = momentum.state_mut();
        Some(theta.into_iter().zip(eps_tensors).collect())
    }

    /// Per-group and total parameter counts.
    pub fn count_params(&self) -> ParamCounts {
        let per_group: Vec<(GroupKind, usize)> = GroupKind::ALL
            .iter()
            .map(|&k| {
                (
                    k,
                    self.group_params(k).iter().map(|t| t.numel()).sum::<usize>(),
                )
            })
            .collect();
        let total = per_group.iter().map(|(_, n)| n).sum();
        ParamCounts { per_group, total }
    }

    /// Multiply-accumulate estimate for one input image: 2*MACs over convs
    /// and linears, ignoring activations and BN.
    pub fn estimate_flops(&self) -> u64 {
        let (mut h, mut w) = (self.config.input_height, self.config.input_width);
        let mut total = 0u64;
        for layer in &self.backbone {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
            total += layer.conv.flops(h, w);
        }
        // expansion keeps the spatial size; the momentum twin repeats it
        total += self.expansion.conv.flops(h, w);
        if self.momentum.is_some() {
            total += self.expansion.conv.flops(h, w);
        }
        if let Some(f) = &self.fusion {
            total += f.branch1.flops(h, w);
            total += f.branch3.flops(h, w);
            total += f.branch5.flops(h, w);
            total += f.proj.flops(h, w);
        }
        total += self.head.fc1.flops();
        total += self.head.fc2.flops();
        total
    }
}

fn cba_vars(v: &ConvBnActVars) -> Vec<Var> {
    vec![v.conv.w, v.conv.b, v.bn.gamma, v.bn.beta]
}

fn fusion_vars(v: &FusionVars) -> Vec<Var> {
    let mut out = vec![
        v.branch1.w,
        v.branch1.b,
        v.branch3.w,
        v.branch3.b,
        v.branch5.w,
        v.branch5.b,
        v.proj.w,
        v.proj.b,
    ];
    if let Some(bn) = &v.post {
        out.push(bn.gamma);
        out.push(bn.beta);
    }
    out
}

fn head_vars(v: &HeadVars) -> Vec<Var> {
    vec![v.bn.gamma, v.bn.beta, v.fc1.w, v.fc1.b, v.fc2.w, v.fc2.b]
}

/// Parameter tally per group.
#[derive(Debug, Clone)]
pub struct ParamCounts {
    pub per_group: Vec<(GroupKind, usize)>,
    pub total: usize,
}

impl ParamCounts {
    pub fn group(&self, kind: GroupKind) -> usize {
        self.per_group
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, n)| *n)
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use approx::assert_abs_diff_eq;

    fn desk_config() -> ModelConfig {
        ModelConfig {
            input_height: 16,
            input_width: 16,
            backbone_stage_widths: vec![6, 8],
            c_pre: 8,
            c_out: 16,
            fusion_reduction: 4,
            head_hidden: 12,
            num_classes: 5,
            ..ModelConfig::default()
        }
    }

    fn random_input(config: &ModelConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Aux);
        let len = n * config.input_channels * config.input_height * config.input_width;
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(
            &[
                n,
                config.input_channels,
                config.input_height,
                config.input_width,
            ],
            data,
        )
        .unwrap()
    }

    #[test]
    fn momentum_starts_as_exact_copy() {
        let model = build_model(&desk_config(), 1).unwrap();
        let theta = model.group_state(GroupKind::Expansion);
        let eps = model.group_state(GroupKind::Momentum);
        assert_eq!(theta.len(), eps.len());
        for (t, e) in theta.iter().zip(&eps) {
            assert_eq!(t.shape(), e.shape());
            let max_diff = t
                .data()
                .iter()
                .zip(e.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert_eq!(max_diff, 0.0);
        }
    }

    #[test]
    fn fusion_branches_reduce_by_r() {
        let config = ModelConfig {
            input_height: 32,
            input_width: 32,
            backbone_stage_widths: vec![16, 32],
            c_pre: 32,
            c_out: 64,
            fusion_reduction: 4,
            num_classes: 14,
            ..ModelConfig::default()
        };
        let model = build_model(&config, 0).unwrap();
        let fusion = model.fusion.as_ref().unwrap();
        assert_eq!(fusion.branch1.w.shape(), &[16, 64, 1, 1]);
        assert_eq!(fusion.branch3.w.shape(), &[16, 64, 3, 3]);
        assert_eq!(fusion.branch5.w.shape(), &[16, 64, 5, 5]);
        assert_eq!(fusion.proj.w.shape(), &[64, 16, 1, 1]);
    }

    #[test]
    fn momentum_param_count_equals_expansion() {
        let model = build_model(&desk_config(), 3).unwrap();
        let counts = model.count_params();
        assert_eq!(
            counts.group(GroupKind::Momentum),
            counts.group(GroupKind::Expansion)
        );
        // removing the momentum branch removes exactly one expansion copy
        let without = build_model(
            &ModelConfig {
                use_momentum: false,
                ..desk_config()
            },
            3,
        )
        .unwrap();
        assert_eq!(
            counts.total - without.count_params().total,
            counts.group(GroupKind::Expansion)
        );
    }

    #[test]
    fn rejects_indivisible_fusion_reduction() {
        let config = ModelConfig {
            c_out: 30,
            fusion_reduction: 4,
            ..desk_config()
        };
        assert!(matches!(build_model(&config, 0), Err(Error::Config(_))));
    }

    #[test]
    fn backbone_halves_spatial_size_per_stage() {
        let config = ModelConfig {
            input_height: 32,
            input_width: 32,
            backbone_stage_widths: vec![16, 32],
            c_pre: 32,
            c_out: 64,
            ..ModelConfig::default()
        };
        assert_eq!(config.backbone_out_size(), (8, 8));
        let mut model = build_model(&config, 0).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(random_input(&config, 2, 5));
        let x1 = model.forward_backbone(&mut g, &vars, x, Mode::Eval).unwrap();
        assert_eq!(g.value(x1).shape(), &[2, 32, 8, 8]);
    }

    #[test]
    fn zero_input_gives_zero_backbone_output_in_eval() {
        let config = desk_config();
        let mut model = build_model(&config, 0).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let x1 = model.forward_backbone(&mut g, &vars, x, Mode::Eval).unwrap();
        assert!(g.value(x1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut model = build_model(&desk_config(), 0).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 20, 16]));
        assert!(matches!(
            model.forward_backbone(&mut g, &vars, x, Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn expansion_and_momentum_agree_at_init() {
        let config = desk_config();
        let mut model = build_model(&config, 7).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(random_input(&config, 2, 8));
        let x1 = model.forward_backbone(&mut g, &vars, x, Mode::Eval).unwrap();
        let h = model
            .forward_expansion(&mut g, &vars, x1, Mode::Eval)
            .unwrap();
        let z = model
            .forward_momentum(&mut g, &vars, x1, Mode::Eval, false)
            .unwrap();
        assert_eq!(g.value(h).data(), g.value(z).data());
    }

    #[test]
    fn full_forward_shapes_and_grads() {
        let config = desk_config();
        let mut model = build_model(&config, 2).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(random_input(&config, 2, 9));
        let mut drop_rng = stream_rng(2, Stream::Dropout);
        let logits = model
            .forward_full(&mut g, &vars, x, Mode::Train, &mut drop_rng, false)
            .unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 5]);

        let targets = Tensor::from_vec(
            &[2, 5],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        g.backward(loss).unwrap();
        model.accumulate_grads(&g, &vars).unwrap();

        for kind in [
            GroupKind::Backbone,
            GroupKind::Expansion,
            GroupKind::Fusion,
            GroupKind::Head,
        ] {
            for t in model.group_params(kind) {
                assert!(t.grad.is_some(), "missing grad in group {}", kind.name());
            }
        }
        for t in model.group_params(GroupKind::Momentum) {
            assert!(t.grad.is_none(), "momentum group must not receive grads");
        }
    }

    #[test]
    fn stop_gradient_blocks_backbone_through_momentum_only_path() {
        // without fusion, the only path to the backbone is through the
        // momentum branch; stop-gradient must leave the backbone gradless
        let config = ModelConfig {
            use_fusion: false,
            ..desk_config()
        };
        let mut model = build_model(&config, 2).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(random_input(&config, 2, 10));
        let mut drop_rng = stream_rng(2, Stream::Dropout);
        let logits = model
            .forward_full(&mut g, &vars, x, Mode::Train, &mut drop_rng, true)
            .unwrap();
        let targets = Tensor::zeros(&[2, 5]);
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        g.backward(loss).unwrap();
        model.accumulate_grads(&g, &vars).unwrap();
        for t in model.group_params(GroupKind::Backbone) {
            assert!(t.grad.is_none());
        }
        for t in model.group_params(GroupKind::Expansion) {
            assert!(t.grad.is_none(), "expansion is bypassed entirely here");
        }
        for t in model.group_params(GroupKind::Head) {
            assert!(t.grad.is_some());
        }
    }

    #[test]
    fn zero_fusion_weights_degenerate_to_momentum_path() {
        let config = desk_config();
        let mut model = build_model(&config, 4).unwrap();
        for t in model.group_state_mut(GroupKind::Fusion) {
            if t.shape().len() == 4 {
                t.data_mut().fill(0.0);
            }
        }
        let x = random_input(&config, 2, 11);

        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut drop_rng = stream_rng(3, Stream::Dropout);
        let logits_full = model
            .forward_full(&mut g, &vars, xv, Mode::Eval, &mut drop_rng, false)
            .unwrap();
        let full = g.value(logits_full).data().to_vec();

        // single-path reference: pool g_theta(f(x)) directly
        let mut baseline = build_model(
            &ModelConfig {
                use_fusion: false,
                use_momentum: false,
                ..config
            },
            4,
        )
        .unwrap();
        for kind in [GroupKind::Backbone, GroupKind::Expansion, GroupKind::Head] {
            let src: Vec<Tensor> = model.group_state(kind).into_iter().cloned().collect();
            for (dst, s) in baseline.group_state_mut(kind).into_iter().zip(src) {
                dst.data_mut().copy_from_slice(s.data());
            }
        }
        let mut g2 = Graph::new();
        let vars2 = baseline.bind(&mut g2);
        let xv2 = g2.constant(x);
        let mut drop_rng2 = stream_rng(3, Stream::Dropout);
        let logits_base = baseline
            .forward_full(&mut g2, &vars2, xv2, Mode::Eval, &mut drop_rng2, false)
            .unwrap();
        assert_eq!(full, g2.value(logits_base).data());
    }

    #[test]
    fn fusion_is_linear_without_nonlinearity() {
        let config = ModelConfig {
            fusion_nonlinearity: false,
            ..desk_config()
        };
        let mut model = build_model(&config, 6).unwrap();
        // biases start at zero; only conv weights carry randomness
        let (hh, hw) = config.backbone_out_size();
        let shape = [2, config.c_out, hh, hw];
        let mut rng = stream_rng(12, Stream::Aux);
        let mut mk = || {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Tensor::from_vec(&shape, data).unwrap()
        };
        let h1 = mk();
        let h2 = mk();
        let (a, b) = (0.7, -1.3);
        let combo_data: Vec<f64> = h1
            .data()
            .iter()
            .zip(h2.data())
            .map(|(x, y)| a * x + b * y)
            .collect();
        let combo = Tensor::from_vec(&shape, combo_data).unwrap();

        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let v1 = g.constant(h1);
        let v2 = g.constant(h2);
        let vc = g.constant(combo);
        let z1 = model.forward_fusion(&mut g, &vars, v1, Mode::Eval).unwrap();
        let z2 = model.forward_fusion(&mut g, &vars, v2, Mode::Eval).unwrap();
        let zc = model.forward_fusion(&mut g, &vars, vc, Mode::Eval).unwrap();
        for i in 0..g.value(zc).numel() {
            let lhs = g.value(zc).data()[i];
            let rhs = a * g.value(z1).data()[i] + b * g.value(z2).data()[i];
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn fusion_preserves_spatial_shape() {
        let config = desk_config();
        let mut model = build_model(&config, 6).unwrap();
        let (hh, hw) = config.backbone_out_size();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let h = g.constant(Tensor::zeros(&[3, config.c_out, hh, hw]));
        let z = model.forward_fusion(&mut g, &vars, h, Mode::Eval).unwrap();
        assert_eq!(g.value(z).shape(), &[3, config.c_out, hh, hw]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_build_is_reproducible() {
        let config = desk_config();
        let x = random_input(&config, 2, 13);
        let run = || {
            let mut model = build_model(&config, 42).unwrap();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let xv = g.constant(x.clone());
            let mut rng = stream_rng(42, Stream::Dropout);
            let logits = model
                .forward_full(&mut g, &vars, xv, Mode::Eval, &mut rng, false)
                .unwrap();
            g.value(logits).data().to_vec()
        };
        let a = run();
        let b = run();
        // bitwise identical
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn linear_param_count_example() {
        let mut rng = stream_rng(0, Stream::Aux);
        let layer = LinearLayer::init(512, 14, &mut rng);
        let n: usize = layer.params().iter().map(|t| t.numel()).sum();
        assert_eq!(n, 7182);
    }

    #[test]
    fn conv_flop_example() {
        let mut rng = stream_rng(0, Stream::Aux);
        let conv = Conv::init(64, 16, 1, 1, 0, &mut rng);
        assert_eq!(conv.flops(8, 8), 131_072);
    }

    #[test]
    fn flops_momentum_adds_one_expansion_pass() {
        let with = build_model(&desk_config(), 0).unwrap();
        let without = build_model(
            &ModelConfig {
                use_momentum: false,
                ..desk_config()
            },
            0,
        )
        .unwrap();
        let delta = with.estimate_flops() - without.estimate_flops();
        assert_eq!(delta, with.expansion.conv.flops(4, 4));
        assert!(delta > 0);
    }
}
