use rand::RngCore;
use voxtrain_tensor::nn::{dropout, join, Ctx, Linear, Module, Slot};
use voxtrain_tensor::{Element, Var};

use crate::spec::{resolve_sizes, ModelError, OutputSpec};

/// `Linear -> ReLU -> dropout` stack.
pub(crate) struct Mlp<T: Element> {
    layers: Vec<Linear<T>>,
}

impl<T: Element> Mlp<T> {
    fn new(input: usize, sizes: &[usize], rng: &mut dyn RngCore) -> Self {
        let mut c = input;
        let layers = sizes
            .iter()
            .map(|&s| {
                let l = Linear::new(c, s, true, rng);
                c = s;
                l
            })
            .collect();
        Self { layers }
    }

    fn out_features(&self, input: usize) -> usize {
        self.layers.last().map_or(input, Linear::out_features)
    }

    fn forward(&self, x: &Var<T>, p: f64, ctx: &mut Ctx<'_>) -> Var<T> {
        self.layers.iter().fold(x.clone(), |h, l| dropout(&l.forward(&h).relu(), p, ctx))
    }
}

impl<T: Element> Module<T> for Mlp<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.layers.collect(prefix, out);
    }
}

pub(crate) struct Head<T: Element> {
    pub name: String,
    hidden: Mlp<T>,
    out: Linear<T>,
}

impl<T: Element> Module<T> for Head<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.out.collect(&join(prefix, "out"), out);
    }
}

/// Fuses image features with clinical features and emits one value per endpoint.
pub struct OutputModule<T: Element> {
    clinical: Mlp<T>,
    /// Shared layers before the clinical features are concatenated.
    pre: Mlp<T>,
    /// Shared layers from the concatenation point onward.
    post: Mlp<T>,
    pub(crate) heads: Vec<Head<T>>,
    has_tabular: bool,
    dropout: f64,
}

impl<T: Element> OutputModule<T> {
    /// `image_features == 0` selects tabular-only mode, in which shared layers
    /// placed before the concatenation point are dropped.
    ///
    /// `rng` initializes shared layers; `head_rngs` yields one generator per head.
    pub(crate) fn new(
        spec: &OutputSpec,
        image_features: usize,
        n_tabular: usize,
        heads: &[String],
        rng: &mut dyn RngCore,
        head_rng: &mut dyn FnMut(&str) -> Box<dyn RngCore>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        if image_features == 0 && n_tabular == 0 {
            return Err(ModelError::InvalidSpec("model has neither image nor tabular inputs".into()));
        }
        if heads.is_empty() {
            return Err(ModelError::InvalidSpec("at least one endpoint is required".into()));
        }
        let shared = resolve_sizes("shared layers", &spec.shared_sizes, spec.n_shared_layers)?;
        let clinical_sizes = if n_tabular > 0 {
            resolve_sizes("clinical layers", &spec.clinical_sizes, spec.n_clinical_layers)?
        } else {
            Vec::new()
        };
        let endpoint_sizes = resolve_sizes("endpoint layers", &spec.endpoint_sizes, spec.n_endpoint_layers)?;
        let split = if n_tabular > 0 { spec.clinical_concat_position } else { shared.len() };

        let clinical = Mlp::new(n_tabular, &clinical_sizes, rng);
        let tab_features = if n_tabular > 0 { clinical.out_features(n_tabular) } else { 0 };
        let pre = if image_features > 0 { Mlp::new(image_features, &shared[..split], rng) } else { Mlp { layers: vec![] } };
        let fused = pre.out_features(image_features) + tab_features;
        let post = Mlp::new(fused, &shared[split..], rng);
        let head_in = post.out_features(fused);
        let heads = heads
            .iter()
            .map(|name| {
                let mut r = head_rng(name);
                let hidden = Mlp::new(head_in, &endpoint_sizes, r.as_mut());
                let out = Linear::new(hidden.out_features(head_in), 1, true, r.as_mut());
                Head { name: name.clone(), hidden, out }
            })
            .collect();
        Ok(Self { clinical, pre, post, heads, has_tabular: n_tabular > 0, dropout: spec.dropout })
    }

    /// `image` is `(B, F)` or absent in tabular-only mode; `tabular` is `(B, n_tabular)`.
    pub fn forward(&self, image: Option<&Var<T>>, tabular: Option<&Var<T>>, ctx: &mut Ctx<'_>) -> Var<T> {
        let p = self.dropout;
        let mut parts = Vec::new();
        if let Some(img) = image {
            parts.push(self.pre.forward(img, p, ctx));
        }
        if self.has_tabular {
            let tab = tabular.expect("tabular input required");
            parts.push(self.clinical.forward(tab, p, ctx));
        }
        let fused = if parts.len() == 1 { parts.pop().unwrap() } else { Var::concat(&parts, 1) };
        let h = self.post.forward(&fused, p, ctx);
        let outs: Vec<Var<T>> = self.heads.iter().map(|head| head.out.forward(&head.hidden.forward(&h, p, ctx))).collect();
        Var::concat(&outs, 1)
    }
}

impl<T: Element> Module<T> for OutputModule<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.clinical.collect(&join(prefix, "clinical"), out);
        self.pre.collect(&join(prefix, "shared_pre"), out);
        self.post.collect(&join(prefix, "shared_post"), out);
        for head in &self.heads {
            head.collect(&join(prefix, &format!("heads.{}", head.name)), out);
        }
    }
}
