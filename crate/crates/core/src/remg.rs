//! Residual embedding modules (REMs) and their groups.
//!
//! A REM maps `x` to `x + relu(x W1) W2` with a bottleneck of width
//! `C_in / r`. A group holds M independently parameterized REMs and turns one
//! feature into M candidates in the opposite modality's space. One group
//! exists per (direction, granularity); local and non-local parts share
//! their group.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::Granularity;
use crate::encoders::MultiGrainedFeatures;
use crate::error::{bail, Result};
use crate::params::{linear_init, Binder, Params};
use crate::tensor::{matmul_acc, Tensor};

/// Projection direction of a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    /// Visual features into the text space.
    ImageToText,
    /// Textual features into the image space.
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn tag(self) -> &'static str {
        match self {
            Direction::ImageToText => "v2t",
            Direction::TextToImage => "t2v",
        }
    }
}

pub fn rem_name(dir: Direction, gran: Granularity, idx: usize, which: &str) -> String {
    format!("remg.{}.{}.m{idx}.{which}", dir.tag(), gran.name())
}

/// One residual embedding module.
#[derive(Clone, Debug, PartialEq)]
pub struct REMParams {
    w1: Tensor,
    w2: Tensor,
}

impl REMParams {
    /// `w1 [C_in, C_in/r]`, `w2 [C_in/r, C_in]`.
    pub fn new(w1: Tensor, w2: Tensor) -> Result<Self> {
        if w1.ndim() != 2 || w2.ndim() != 2 {
            bail!(Shape, "REM weights must be matrices");
        }
        let (c_in, hidden) = (w1.dim(0), w1.dim(1));
        if hidden == 0 || c_in % hidden != 0 {
            bail!(Shape, "bottleneck width {hidden} does not divide C_in = {c_in}");
        }
        if w2.shape() != [hidden, c_in] {
            bail!(Shape, "W2 must be [{hidden}, {c_in}], got {:?}", w2.shape());
        }
        Ok(Self { w1, w2 })
    }

    /// Fan-in uniform `W1` and zero `W2`, so the module starts as the identity.
    pub fn init<R: Rng + ?Sized>(c_in: usize, r: usize, rng: &mut R) -> Result<Self> {
        if r == 0 || c_in % r != 0 {
            bail!(Config, "reduction ratio {r} must divide C_in = {c_in}");
        }
        Self::new(linear_init(c_in, c_in / r, rng), Tensor::zeros(&[c_in / r, c_in]))
    }

    pub fn input_dim(&self) -> usize {
        self.w1.dim(0)
    }

    pub fn reduction(&self) -> usize {
        self.w1.dim(0) / self.w1.dim(1)
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }

    pub fn weight_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

pub fn rem_forward(x: &[f64], rem: &REMParams) -> Result<Vec<f64>> {
    let c = rem.input_dim();
    if x.len() != c {
        bail!(Argument, "REM input has length {}, expected {c}", x.len());
    }
    let h = rem.w1.dim(1);
    let mut hidden = alloc::vec![0.0; h];
    matmul_acc(x, rem.w1.data(), &mut hidden, 1, c, h);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = x.to_vec();
    matmul_acc(&hidden, rem.w2.data(), &mut out, 1, h, c);
    Ok(out)
}

/// M REMs for one (direction, granularity).
#[derive(Clone, Debug, PartialEq)]
pub struct REMGroup {
    rems: Vec<REMParams>,
    pub direction: Direction,
    pub granularity: Granularity,
}

impl REMGroup {
    pub fn new(rems: Vec<REMParams>, direction: Direction, granularity: Granularity) -> Result<Self> {
        let Some(first) = rems.first() else {
            bail!(Config, "a REM group needs at least one member");
        };
        let (c, h) = (first.w1.dim(0), first.w1.dim(1));
        if rems.iter().any(|r| r.w1.dim(0) != c || r.w1.dim(1) != h) {
            bail!(Shape, "REM group members differ in C_in or r");
        }
        Ok(Self { rems, direction, granularity })
    }

    pub fn from_params(params: &Params, dir: Direction, gran: Granularity, m: usize) -> Result<Self> {
        let mut rems = Vec::with_capacity(m);
        for idx in 0..m {
            let get = |w: &str| {
                let name = rem_name(dir, gran, idx, w);
                match params.get(&name) {
                    Some(t) => Ok(t.clone()),
                    None => Err(crate::BeatError::Config(format!("missing REM weight '{name}'"))),
                }
            };
            rems.push(REMParams::new(get("W1")?, get("W2")?)?);
        }
        Self::new(rems, dir, gran)
    }

    pub fn members(&self) -> &[REMParams] {
        &self.rems
    }

    pub fn len(&self) -> usize {
        self.rems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rems.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.rems[0].input_dim()
    }

    /// Equals `M * 2 * C_in^2 / r`.
    pub fn weight_count(&self) -> usize {
        self.rems.iter().map(REMParams::weight_count).sum()
    }
}

pub fn remg_embed(x: &[f64], group: &REMGroup) -> Result<Vec<Vec<f64>>> {
    group.rems.iter().map(|r| rem_forward(x, r)).collect()
}

/// Both modalities projected into the opposite space: candidate `m` of
/// `v_in_text` is every granularity of `v` passed through REM `m` of the
/// matching image-to-text group, and symmetrically for `t_in_image`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPair {
    pub v_in_text: Vec<MultiGrainedFeatures>,
    pub t_in_image: Vec<MultiGrainedFeatures>,
}

fn find_group(groups: &[REMGroup], dir: Direction, gran: Granularity) -> Result<&REMGroup> {
    match groups.iter().find(|g| g.direction == dir && g.granularity == gran) {
        Some(g) => Ok(g),
        None => bail!(Config, "no {} {} REM group", dir.tag(), gran.name()),
    }
}

fn embed_features(f: &MultiGrainedFeatures, groups: &[REMGroup], dir: Direction) -> Result<Vec<MultiGrainedFeatures>> {
    let global = find_group(groups, dir, Granularity::Global)?;
    let local = find_group(groups, dir, Granularity::Local)?;
    let nonlocal = find_group(groups, dir, Granularity::Nonlocal)?;
    if local.len() != global.len() || nonlocal.len() != global.len() {
        bail!(Config, "REM groups of one direction disagree on M");
    }
    let parts = |xs: &[Vec<f64>], rem: &REMParams| xs.iter().map(|x| rem_forward(x, rem)).collect::<Result<Vec<_>>>();
    (0..global.len())
        .map(|m| {
            Ok(MultiGrainedFeatures {
                global: rem_forward(&f.global, &global.rems[m])?,
                local: parts(&f.local, &local.rems[m])?,
                nonlocal: parts(&f.nonlocal, &nonlocal.rems[m])?,
            })
        })
        .collect()
}

pub fn bidirectional_embed(
    v: &MultiGrainedFeatures,
    t: &MultiGrainedFeatures,
    groups: &[REMGroup],
) -> Result<EmbeddedPair> {
    Ok(EmbeddedPair {
        v_in_text: embed_features(v, groups, Direction::ImageToText)?,
        t_in_image: embed_features(t, groups, Direction::TextToImage)?,
    })
}

pub fn init_group_params<R: Rng + ?Sized>(
    params: &mut Params,
    dir: Direction,
    gran: Granularity,
    c_in: usize,
    m: usize,
    r: usize,
    rng: &mut R,
) -> Result<()> {
    for idx in 0..m {
        let rem = REMParams::init(c_in, r, rng)?;
        params.insert(rem_name(dir, gran, idx, "W1"), rem.w1);
        params.insert(rem_name(dir, gran, idx, "W2"), rem.w2);
    }
    Ok(())
}

/// `x + relu(x W1) W2` over the last axis of `x`.
pub fn rem_graph(g: &mut Graph, x: Var, w1: Var, w2: Var) -> Var {
    let h = g.matmul(x, w1);
    let h = g.relu(h);
    let y = g.matmul(h, w2);
    g.add(x, y)
}

/// The M candidates of `x` under one group.
pub fn remg_graph(g: &mut Graph, b: &mut Binder, x: Var, dir: Direction, gran: Granularity, m: usize) -> Vec<Var> {
    (0..m)
        .map(|idx| {
            let w1 = b.get(g, &rem_name(dir, gran, idx, "W1"));
            let w2 = b.get(g, &rem_name(dir, gran, idx, "W2"));
            rem_graph(g, x, w1, w2)
        })
        .collect()
}
