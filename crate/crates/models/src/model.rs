use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxtrain_tensor::nn::{join, Ctx, Module, Slot};
use voxtrain_tensor::{Element, Var};

use crate::encoder::Encoder;
use crate::head::OutputModule;
use crate::spec::{Architecture, EncoderSpec, EndpointSpec, ModelError, OutputSpec};

/// Optional image encoder plus the output module, one head per endpoint.
pub struct ComposedModel<T: Element> {
    encoder: Option<Encoder<T>>,
    output: OutputModule<T>,
    endpoints: Vec<EndpointSpec>,
    n_modalities: usize,
    n_tabular: usize,
}

/// Stable 64-bit FNV-1a, used to give each head its own random stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Builds a model whose initial weights depend only on the specs and `seed`.
///
/// Each head draws from a stream keyed by its endpoint name, so reordering
/// endpoints reorders outputs without changing any head.
pub fn build_model<T: Element>(
    encoder: &EncoderSpec,
    output: &OutputSpec,
    endpoints: &[EndpointSpec],
    n_modalities: usize,
    n_tabular: usize,
    seed: u64,
) -> Result<ComposedModel<T>, ModelError> {
    let mlp_mode = encoder.architecture == Architecture::None;
    if mlp_mode && n_modalities > 0 {
        return Err(ModelError::InvalidSpec("architecture 'none' cannot take image modalities".into()));
    }
    if !mlp_mode && n_modalities == 0 {
        return Err(ModelError::InvalidSpec(format!(
            "architecture '{}' needs image modalities; use 'none' for tabular-only models",
            encoder.architecture
        )));
    }
    let mut names: Vec<&str> = endpoints.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(ModelError::InvalidSpec("endpoint names must be unique".into()));
    }
    let encoder = if mlp_mode { None } else { Some(Encoder::new(encoder, n_modalities, &mut stream(seed, 0))?) };
    let image_features = encoder.as_ref().map_or(0, Encoder::out_features);
    let head_names: Vec<String> = endpoints.iter().map(|e| e.name.clone()).collect();
    let mut head_rng = |name: &str| -> Box<dyn RngCore> { Box::new(stream(seed, 2 + fnv1a(name) / 2)) };
    let output = OutputModule::new(output, image_features, n_tabular, &head_names, &mut stream(seed, 1), &mut head_rng)?;
    Ok(ComposedModel { encoder, output, endpoints: endpoints.to_vec(), n_modalities, n_tabular })
}

impl<T: Element> ComposedModel<T> {
    pub fn endpoints(&self) -> &[EndpointSpec] {
        &self.endpoints
    }

    pub fn encoder(&self) -> Option<&Encoder<T>> {
        self.encoder.as_ref()
    }

    pub fn is_mlp(&self) -> bool {
        self.encoder.is_none()
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn n_tabular(&self) -> usize {
        self.n_tabular
    }

    /// Returns `(B, E)`: a logit per binary endpoint, a risk score per event endpoint.
    pub fn forward(&self, images: Option<&Var<T>>, tabular: Option<&Var<T>>, ctx: &mut Ctx<'_>) -> Result<Var<T>, ModelError> {
        let batch = match (&self.encoder, images) {
            (Some(_), Some(x)) => x.shape()[0],
            (Some(_), None) => return Err(ModelError::ShapeMismatch("model expects an image batch".into())),
            (None, _) => tabular.map_or(0, |t| t.shape()[0]),
        };
        if self.n_tabular > 0 {
            let t = tabular.ok_or_else(|| ModelError::ShapeMismatch("model expects tabular features".into()))?;
            if t.shape() != [batch, self.n_tabular] {
                return Err(ModelError::ShapeMismatch(format!(
                    "tabular input {:?}, expected [{batch}, {}]",
                    t.shape(),
                    self.n_tabular
                )));
            }
        }
        let features = match (&self.encoder, images) {
            (Some(enc), Some(x)) => Some(enc.forward(x, ctx)?),
            _ => None,
        };
        Ok(self.output.forward(features.as_ref(), tabular, ctx))
    }
}

impl<T: Element> Module<T> for ComposedModel<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.output.collect(&join(prefix, "output"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::EndpointKind;
    use std::collections::HashSet;
    use voxtrain_tensor::Tensor;

    fn endpoints(names: &[&str]) -> Vec<EndpointSpec> {
        names.iter().map(|n| EndpointSpec::new(*n, EndpointKind::Binary)).collect()
    }

    fn tiny_cnn() -> EncoderSpec {
        let mut spec = EncoderSpec::new(Architecture::Cnn, "");
        spec.cnn_widths = vec![4];
        spec
    }

    #[test]
    fn mlp_mode_has_no_convolutions() {
        let m = build_model::<f32>(&EncoderSpec::none(), &OutputSpec::default(), &endpoints(&["a", "b"]), 0, 5, 1).unwrap();
        assert!(m.is_mlp());
        assert!(m.named_slots().iter().all(|(_, s)| s.value().ndim() <= 2));
        let y = m.forward(None, Some(&Var::constant(Tensor::zeros(&[3, 5]))), &mut Ctx::eval()).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
    }

    #[test]
    fn heads_share_no_parameters() {
        let spec = OutputSpec { n_endpoint_layers: 2, ..Default::default() };
        let m = build_model::<f32>(&tiny_cnn(), &spec, &endpoints(&["a", "b"]), 1, 0, 1).unwrap();
        let ids = |head: &str| -> HashSet<usize> {
            m.named_slots()
                .into_iter()
                .filter(|(n, _)| n.starts_with(&format!("output.heads.{head}.")))
                .filter_map(|(_, s)| match s {
                    Slot::Param(p) => Some(p.id()),
                    Slot::Buffer(_) => None,
                })
                .collect()
        };
        let (a, b) = (ids("a"), ids("b"));
        assert_eq!(a.len(), 6);
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn concat_position_zero_widens_first_shared_layer() {
        let spec = OutputSpec { n_clinical_layers: 1, clinical_sizes: vec![3], ..Default::default() };
        let m = build_model::<f32>(&tiny_cnn(), &spec, &endpoints(&["a"]), 1, 2, 1).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = m.named_slots().into_iter().map(|(n, s)| (n, s.value().shape().to_vec())).collect();
        let first_shared = shapes.iter().find(|(n, _)| n == "output.shared_post.0.weight").unwrap();
        assert_eq!(first_shared.1, vec![64, 4 + 3]);
    }

    #[test]
    fn modality_and_architecture_must_agree() {
        assert!(build_model::<f32>(&EncoderSpec::none(), &OutputSpec::default(), &endpoints(&["a"]), 1, 2, 0).is_err());
        assert!(build_model::<f32>(&tiny_cnn(), &OutputSpec::default(), &endpoints(&["a"]), 0, 2, 0).is_err());
        assert!(build_model::<f32>(&tiny_cnn(), &OutputSpec::default(), &endpoints(&["a", "a"]), 1, 0, 0).is_err());
    }
}
