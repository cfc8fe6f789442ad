//! Layer stacks of the two contrastive branches and of the downstream classifier.

use hcl_autodiff::{LayerSpec, ParamSet, Real, Result as NnResult, Sequential};
use rand::Rng;

pub const PATCH_CHANNELS: usize = 9;
/// Representation length `m` produced by the online encoder.
pub const ENCODER_DIM: usize = 128;
/// Embedding length `d` shared by both branches.
pub const EMBED_DIM: usize = 64;

pub const ONLINE_ENCODER: &str = "online.encoder";
pub const ONLINE_PROJECTION: &str = "online.projection";
pub const TARGET: &str = "target";
pub const HEAD: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// 2-D patch branch against a 1-D feature-vector branch.
    Heterogeneous,
    /// One shared 2-D branch applied to two views of the patch.
    Siamese,
}

impl std::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "heterogeneous" => Ok(Self::Heterogeneous),
            "siamese" => Ok(Self::Siamese),
            _ => Err(format!("expected heterogeneous or siamese, got {s}")),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Heterogeneous => "heterogeneous",
            Self::Siamese => "siamese",
        })
    }
}

/// conv 9->32 (pad 2), conv 32->64 (pad 1), each with batch norm, ReLU and
/// 2x2 pooling, then a linear map to `ENCODER_DIM`.
pub fn online_encoder_specs(patch: usize) -> Vec<LayerSpec> {
    let after_first = (patch + 2) / 2;
    let after_second = after_first / 2;
    vec![
        LayerSpec::Conv2d { in_channels: PATCH_CHANNELS, out_channels: 32, kernel: 3, padding: 2 },
        LayerSpec::batch_norm(32),
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Conv2d { in_channels: 32, out_channels: 64, kernel: 3, padding: 1 },
        LayerSpec::batch_norm(64),
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Flatten,
        LayerSpec::Linear { in_features: 64 * after_second * after_second, out_features: ENCODER_DIM },
    ]
}

pub fn projection_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear { in_features: ENCODER_DIM, out_features: ENCODER_DIM },
        LayerSpec::Relu,
        LayerSpec::Linear { in_features: ENCODER_DIM, out_features: EMBED_DIM },
        LayerSpec::L2Norm,
    ]
}

/// Two conv1d blocks (1->16, 16->32, pad 2) with batch norm, ReLU and
/// pooling, flattened. Returns the specs and the flattened length.
pub fn conv1d_trunk_specs(len: usize) -> (Vec<LayerSpec>, usize) {
    let l1 = (len + 2) / 2;
    let l2 = (l1 + 2) / 2;
    let specs = vec![
        LayerSpec::Conv1d { in_channels: 1, out_channels: 16, kernel: 3, padding: 2 },
        LayerSpec::batch_norm(16),
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Conv1d { in_channels: 16, out_channels: 32, kernel: 3, padding: 2 },
        LayerSpec::batch_norm(32),
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Flatten,
    ];
    (specs, 32 * l2)
}

pub fn target_specs(len: usize) -> Vec<LayerSpec> {
    let (mut specs, flat) = conv1d_trunk_specs(len);
    specs.push(LayerSpec::Linear { in_features: flat, out_features: EMBED_DIM });
    specs.push(LayerSpec::L2Norm);
    specs
}

/// Both pretraining branches. In Siamese mode `target` is absent and the
/// online branch embeds both views.
#[derive(Debug, Clone)]
pub struct ContrastiveNet {
    pub architecture: Architecture,
    pub patch: usize,
    pub target_len: usize,
    pub online_encoder: Sequential,
    pub projection: Sequential,
    pub target: Option<Sequential>,
}

impl ContrastiveNet {
    pub fn build<T: Real, R: Rng + ?Sized>(
        architecture: Architecture,
        patch: usize,
        target_len: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> NnResult<Self> {
        let online_encoder =
            Sequential::build(&online_encoder_specs(patch), &[PATCH_CHANNELS, patch, patch], params, ONLINE_ENCODER, rng)?;
        let projection = Sequential::build(&projection_specs(), &[ENCODER_DIM], params, ONLINE_PROJECTION, rng)?;
        let target = match architecture {
            Architecture::Heterogeneous => {
                Some(Sequential::build(&target_specs(target_len), &[1, target_len], params, TARGET, rng)?)
            }
            Architecture::Siamese => None,
        };
        Ok(Self { architecture, patch, target_len, online_encoder, projection, target })
    }

    pub fn online_ids(&self) -> Vec<hcl_autodiff::ParamId> {
        let mut ids = self.online_encoder.param_ids();
        ids.extend(self.projection.param_ids());
        ids
    }
}

/// Online encoder followed by a linear class-score head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub patch: usize,
    pub n_classes: usize,
    pub encoder: Sequential,
    pub head: Sequential,
}

impl Classifier {
    pub fn build<T: Real, R: Rng + ?Sized>(
        patch: usize,
        n_classes: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> NnResult<Self> {
        let encoder =
            Sequential::build(&online_encoder_specs(patch), &[PATCH_CHANNELS, patch, patch], params, ONLINE_ENCODER, rng)?;
        let head = Sequential::build(
            &[LayerSpec::Linear { in_features: ENCODER_DIM, out_features: n_classes }],
            &[ENCODER_DIM],
            params,
            HEAD,
            rng,
        )?;
        Ok(Self { patch, n_classes, encoder, head })
    }
}
