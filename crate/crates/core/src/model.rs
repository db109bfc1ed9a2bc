//! The micro residual backbone with optional ARFAM insertion after each stage.

use crate::arfam::{Arfam, ArfamConfig, SpatialMode};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::uniform_fan_in;
use crate::tensor::{Shape, Tensor};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// `(channels, residual blocks)`; every stage after the first halves the
    /// resolution in its first block.
    pub stages: Vec<(usize, usize)>,
    pub n_classes: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec { in_channels: 3, stem_channels: 8, stages: vec![(8, 1), (16, 1), (32, 1)], n_classes: 8 }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|&(c, b)| c == 0 || b == 0) {
            return Err(Error::Config("backbone needs nonempty stages with positive widths and depths".into()));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config("backbone needs input channels, stem width and >= 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    prefix: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

impl Block {
    fn has_projection(&self) -> bool {
        self.stride != 1 || self.cin != self.cout
    }

    fn shapes(&self) -> Vec<(String, Shape)> {
        let p = &self.prefix;
        let mut out = vec![
            (format!("{p}.conv1.weight"), Shape::new(self.cout, self.cin, 3, 3)),
            (format!("{p}.conv1.bias"), Shape::new(1, self.cout, 1, 1)),
            (format!("{p}.conv2.weight"), Shape::new(self.cout, self.cout, 3, 3)),
            (format!("{p}.conv2.bias"), Shape::new(1, self.cout, 1, 1)),
        ];
        if self.has_projection() {
            out.push((format!("{p}.proj.weight"), Shape::new(self.cout, self.cin, 1, 1)));
        }
        out
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let p = &self.prefix;
        let bind = |t: &mut Tape, n: &str| store.bind(t, &format!("{p}.{n}"), trainable);
        let (w1, b1) = (bind(tape, "conv1.weight")?, bind(tape, "conv1.bias")?);
        let (w2, b2) = (bind(tape, "conv2.weight")?, bind(tape, "conv2.bias")?);
        let h = tape.conv2d(x, w1, Some(b1), self.stride)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, w2, Some(b2), 1)?;
        let short = if self.has_projection() {
            let wp = bind(tape, "proj.weight")?;
            tape.conv2d(x, wp, None, self.stride)?
        } else {
            x
        };
        let s = tape.add(h, short)?;
        tape.relu(s)
    }
}

/// Backbone plus one ARFAM per stage (absent for the baseline).
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: BackboneSpec,
    pub arfam: Option<ArfamConfig>,
    blocks: Vec<Vec<Block>>,
    modules: Vec<Arfam>,
}

impl Model {
    pub fn new(spec: BackboneSpec, arfam: Option<ArfamConfig>) -> Result<Self> {
        spec.validate()?;
        if let Some(cfg) = &arfam {
            cfg.validate()?;
        }
        let mut blocks = Vec::new();
        let mut modules = Vec::new();
        let mut cin = spec.stem_channels;
        for (s, &(c, depth)) in spec.stages.iter().enumerate() {
            let stage = (0..depth)
                .map(|b| Block {
                    prefix: format!("stage{s}.block{b}"),
                    cin: if b == 0 { cin } else { c },
                    cout: c,
                    stride: if b == 0 && s > 0 { 2 } else { 1 },
                })
                .collect();
            blocks.push(stage);
            if let Some(cfg) = &arfam {
                modules.push(Arfam::new(format!("stage{s}.arfam"), c, cfg.clone()));
            }
            cin = c;
        }
        Ok(Model { spec, arfam, blocks, modules })
    }

    pub fn baseline(spec: BackboneSpec) -> Result<Self> {
        Self::new(spec, None)
    }

    pub fn modules(&self) -> &[Arfam] {
        &self.modules
    }

    fn head_width(&self) -> usize {
        self.spec.stages.last().map_or(self.spec.stem_channels, |s| s.0)
    }

    /// Backbone parameter names and shapes, in registration order.
    fn backbone_shapes(&self) -> Vec<(String, Shape)> {
        let s = &self.spec;
        let mut out = vec![
            ("stem.weight".to_string(), Shape::new(s.stem_channels, s.in_channels, 3, 3)),
            ("stem.bias".to_string(), Shape::new(1, s.stem_channels, 1, 1)),
        ];
        for blk in self.blocks.iter().flatten() {
            out.extend(blk.shapes());
        }
        out.push(("fc.weight".to_string(), Shape::new(s.n_classes, self.head_width(), 1, 1)));
        out.push(("fc.bias".to_string(), Shape::new(1, s.n_classes, 1, 1)));
        out
    }

    /// Fresh parameters. Backbone values do not depend on whether ARFAM
    /// modules are present.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape) in self.backbone_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let gain = if name.ends_with("conv2.weight") || name == "fc.weight" { 1.0 } else { RELU_GAIN };
                uniform_fan_in(shape, gain, seed, &name)
            };
            store.insert(name, t);
        }
        for m in &self.modules {
            m.init_params(&mut store, seed);
        }
        store
    }

    /// Analytic parameter count from layer shapes.
    pub fn param_count(&self) -> usize {
        let backbone: usize = self.backbone_shapes().iter().map(|(_, s)| s.numel()).sum();
        backbone + self.modules.iter().map(Arfam::param_count).sum::<usize>()
    }

    /// Logits `N×K×1×1`. `spatial` selects how ARFAM DAGs are evaluated and
    /// is ignored by the baseline.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        spatial: Option<&mut SpatialMode<'_>>,
        trainable: bool,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c != self.spec.in_channels {
            return Err(Error::shape(format!("model expects {} input channels, got {xs}", self.spec.in_channels)));
        }
        if !self.modules.is_empty() && spatial.is_none() {
            return Err(Error::Config("ARFAM model needs a spatial mode".into()));
        }
        let mut spatial = spatial;
        let w = store.bind(tape, "stem.weight", trainable)?;
        let b = store.bind(tape, "stem.bias", trainable)?;
        let h = tape.conv2d(x, w, Some(b), 1)?;
        let mut h = tape.relu(h)?;
        for (s, stage) in self.blocks.iter().enumerate() {
            for blk in stage {
                h = blk.forward(tape, store, h, trainable)?;
            }
            if let (Some(m), Some(mode)) = (self.modules.get(s), spatial.as_deref_mut()) {
                h = m.forward(tape, store, h, mode, trainable)?;
            }
        }
        let z = tape.global_avg_pool(h)?;
        let w = store.bind(tape, "fc.weight", trainable)?;
        let b = store.bind(tape, "fc.bias", trainable)?;
        tape.linear(z, w, Some(b))
    }

    /// Convenience forward on a constant input with no gradient.
    pub fn logits(&self, store: &ParamStore, x: &Tensor, spatial: Option<&mut SpatialMode<'_>>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv, spatial, false)?;
        Ok(tape.value(y).clone())
    }
}
