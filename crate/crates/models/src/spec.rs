use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input spatial size {got:?} is below the minimum {minimum:?} for this encoder")]
    InputTooSmall { minimum: [usize; 3], got: [usize; 3] },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Cnn,
    Resnet,
    Densenet,
    EfficientNetV2,
    ConvNext,
    Vit,
    TransRp,
    None,
}

impl Architecture {
    pub const ALL: [Architecture; 8] = [
        Architecture::Cnn,
        Architecture::Resnet,
        Architecture::Densenet,
        Architecture::EfficientNetV2,
        Architecture::ConvNext,
        Architecture::Vit,
        Architecture::TransRp,
        Architecture::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Cnn => "cnn",
            Architecture::Resnet => "resnet",
            Architecture::Densenet => "densenet",
            Architecture::EfficientNetV2 => "efficientnetv2",
            Architecture::ConvNext => "convnext",
            Architecture::Vit => "vit",
            Architecture::TransRp => "transrp",
            Architecture::None => "none",
        }
    }

    /// Named size variants; empty when the architecture is sized by other fields.
    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Architecture::Resnet => &["10", "18", "34", "50", "101", "152", "200"],
            Architecture::Densenet => &["121", "169", "201", "264"],
            Architecture::EfficientNetV2 => &["XS", "S", "M", "L", "XL"],
            Architecture::ConvNext => &["tiny", "small", "base", "large", "xlarge"],
            _ => &[],
        }
    }

    /// Architectures that end in a convolutional feature map.
    pub fn is_convolutional(self) -> bool {
        matches!(
            self,
            Architecture::Cnn
                | Architecture::Resnet
                | Architecture::Densenet
                | Architecture::EfficientNetV2
                | Architecture::ConvNext
        )
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == lower)
            .ok_or_else(|| ModelError::InvalidSpec(format!("unknown architecture '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitSpec {
    pub patch_size: [usize; 3],
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl Default for VitSpec {
    fn default() -> Self {
        Self { patch_size: [16; 3], hidden: 768, depth: 12, heads: 12, mlp_dim: 3072 }
    }
}

impl VitSpec {
    fn validate(&self, what: &str) -> Result<(), ModelError> {
        if self.patch_size.contains(&0) || self.hidden == 0 || self.heads == 0 || self.mlp_dim == 0 {
            return Err(ModelError::InvalidSpec(format!("{what}: sizes must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidSpec(format!(
                "{what}: hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    /// Size variant for resnet, densenet, efficientnetv2 and convnext.
    pub size: String,
    /// Feature-map width of each `cnn` layer.
    pub cnn_widths: Vec<usize>,
    pub vit: VitSpec,
    /// Convolutional trunk used by `transrp`.
    pub transrp_backbone: Architecture,
    pub transrp_size: String,
    pub transrp_vit: VitSpec,
}

impl EncoderSpec {
    pub fn new(architecture: Architecture, size: impl Into<String>) -> Self {
        Self {
            architecture,
            size: size.into(),
            cnn_widths: vec![16, 32, 64],
            vit: VitSpec::default(),
            transrp_backbone: Architecture::Resnet,
            transrp_size: "10".into(),
            transrp_vit: VitSpec { patch_size: [1; 3], hidden: 512, depth: 4, heads: 8, mlp_dim: 1024 },
        }
    }

    pub fn none() -> Self {
        Self::new(Architecture::None, "")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_variant(self.architecture, &self.size)?;
        match self.architecture {
            Architecture::Cnn if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) => {
                Err(ModelError::InvalidSpec("cnn needs at least one positive layer width".into()))
            }
            Architecture::Vit => self.vit.validate("vit"),
            Architecture::TransRp => {
                if !self.transrp_backbone.is_convolutional() {
                    return Err(ModelError::InvalidSpec(format!(
                        "transrp backbone must be convolutional, got '{}'",
                        self.transrp_backbone
                    )));
                }
                check_variant(self.transrp_backbone, &self.transrp_size)?;
                self.transrp_vit.validate("transrp")
            }
            _ => Ok(()),
        }
    }
}

fn check_variant(arch: Architecture, size: &str) -> Result<(), ModelError> {
    let variants = arch.variants();
    if variants.is_empty() || variants.iter().any(|v| v.eq_ignore_ascii_case(size)) {
        Ok(())
    } else {
        Err(ModelError::InvalidSpec(format!("{arch} has no size '{size}'; expected one of {variants:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSpec {
    pub n_shared_layers: usize,
    pub shared_sizes: Vec<usize>,
    pub n_endpoint_layers: usize,
    pub endpoint_sizes: Vec<usize>,
    pub n_clinical_layers: usize,
    pub clinical_sizes: Vec<usize>,
    /// Index of the shared layer whose input receives the clinical features;
    /// `n_shared_layers` appends them after the last shared layer.
    pub clinical_concat_position: usize,
    pub dropout: f64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            n_shared_layers: 1,
            shared_sizes: vec![64],
            n_endpoint_layers: 1,
            endpoint_sizes: vec![32],
            n_clinical_layers: 0,
            clinical_sizes: vec![16],
            clinical_concat_position: 0,
            dropout: 0.0,
        }
    }
}

/// Expands a size list to `n` entries; a single entry is repeated.
pub(crate) fn resolve_sizes(what: &str, sizes: &[usize], n: usize) -> Result<Vec<usize>, ModelError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let out = match sizes.len() {
        1 => vec![sizes[0]; n],
        len if len == n => sizes.to_vec(),
        len => {
            return Err(ModelError::InvalidSpec(format!("{what}: {len} sizes given for {n} layers")));
        }
    };
    if out.contains(&0) {
        return Err(ModelError::InvalidSpec(format!("{what}: sizes must be positive")));
    }
    Ok(out)
}

impl OutputSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidSpec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.clinical_concat_position > self.n_shared_layers {
            return Err(ModelError::InvalidSpec(format!(
                "clinical concat position {} exceeds {} shared layers",
                self.clinical_concat_position, self.n_shared_layers
            )));
        }
        resolve_sizes("shared layers", &self.shared_sizes, self.n_shared_layers)?;
        resolve_sizes("endpoint layers", &self.endpoint_sizes, self.n_endpoint_layers)?;
        resolve_sizes("clinical layers", &self.clinical_sizes, self.n_clinical_layers)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EndpointKind {
    /// One logit per patient.
    Binary,
    /// One unbounded risk score per patient.
    Event,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EndpointSpec {
    pub name: String,
    pub kind: EndpointKind,
}

impl EndpointSpec {
    pub fn new(name: impl Into<String>, kind: EndpointKind) -> Self {
        Self { name: name.into(), kind }
    }
}
