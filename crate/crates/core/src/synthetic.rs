//! Deterministic synthetic dumps for tests, demos and smoke runs.
//!
//! All values are multiples of 1/256 with small magnitude, so sums are
//! exact in `f32` and the additive reconstruction error is exactly zero.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::store::{
    ContributionBank, ImageRecord, ImageTokens, ModelMeta, TextBank, ANALYZED_LAYER_COUNT,
};

const QUANTUM: f64 = 1.0 / 256.0;

const VOCAB: &[&str] = &[
    "a photo of a red object",
    "a photo of a blue object",
    "vivid colors",
    "a black and white photo",
    "a photo taken in Paris",
    "a photo taken in New York",
    "a landmark in India",
    "a beach in Brazil",
    "a photo of a dog",
    "a photo of a cat",
    "a bird in flight",
    "a horse in a field",
    "a stormy sky",
    "a sunny summer day",
    "snow falling",
    "a tornado",
    "a smiling child",
    "a sad face",
    "a frightened person",
    "an angry crowd",
    "a wooden texture",
    "a metallic surface",
    "soft fur",
    "rough stone",
    "a close-up shot",
    "an aerial view",
    "a wide-angle landscape",
    "a blurry photo",
    "a group of people",
    "a single person",
    "a crowded street",
    "an empty room",
    "a bowl of fruit",
    "a glass of wine",
    "a tall tower",
    "a wooden bridge",
    "text on a sign",
    "a cartoon drawing",
    "an oil painting",
    "a pencil sketch",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub model_id: String,
    pub pretrain_tag: String,
    pub images: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub texts: usize,
    pub with_tokens: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            model_id: "synthetic".into(),
            pretrain_tag: "fixture".into(),
            images: 16,
            embed_dim: 8,
            num_layers: 6,
            heads_per_layer: 2,
            image_size: 64,
            patch_size: 32,
            texts: 12,
            with_tokens: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub bank: ContributionBank,
    pub tokens: Vec<ImageTokens>,
    pub texts: TextBank,
}

fn quantize(x: f64) -> f32 {
    ((x / QUANTUM).round() * QUANTUM).clamp(-16.0, 16.0) as f32
}

pub fn text_description(i: usize) -> String {
    if i < VOCAB.len() {
        VOCAB[i].to_string()
    } else {
        format!("{} ({})", VOCAB[i % VOCAB.len()], i / VOCAB.len())
    }
}

/// Builds a fixture where each head's contributions concentrate along one
/// text embedding, plus isotropic noise.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> SyntheticFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = ModelMeta::vit(
        spec.model_id.clone(),
        spec.pretrain_tag.clone(),
        spec.embed_dim,
        spec.num_layers,
        spec.heads_per_layer,
        spec.image_size,
        spec.patch_size,
    )
    .expect("synthetic spec describes a valid model");
    let (n, d, h) = (spec.images, spec.embed_dim, spec.heads_per_layer);
    let m = spec.texts.max(2);

    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);

    let mut embeddings = Array2::<f32>::zeros((m, d));
    for j in 0..m {
        loop {
            for k in 0..d {
                embeddings[[j, k]] = quantize(normal(&mut rng));
            }
            if embeddings.row(j).iter().any(|&v| v != 0.0) {
                break;
            }
        }
    }
    let texts = TextBank {
        descriptions: (0..m).map(text_description).collect(),
        embeddings,
    };

    let mut cls = Array4::<f32>::zeros((ANALYZED_LAYER_COUNT, h, n, d));
    for l in 0..ANALYZED_LAYER_COUNT {
        for hh in 0..h {
            let topic = rng.random_range(0..m);
            let scale = 1.0 + rng.random::<f64>() * 2.0;
            for i in 0..n {
                let a = normal(&mut rng) * scale;
                for k in 0..d {
                    let v = a * texts.embeddings[[topic, k]] as f64 / (d as f64).sqrt()
                        + 0.1 * normal(&mut rng);
                    cls[[l, hh, i, k]] = quantize(v);
                }
            }
        }
    }
    let mut base = Array2::<f32>::zeros((n, d));
    let mut full = Array2::<f32>::zeros((n, d));
    for i in 0..n {
        for k in 0..d {
            base[[i, k]] = quantize(normal(&mut rng));
            let mut acc = base[[i, k]] as f64;
            for l in 0..ANALYZED_LAYER_COUNT {
                for hh in 0..h {
                    acc += cls[[l, hh, i, k]] as f64;
                }
            }
            full[[i, k]] = acc as f32;
        }
    }
    let images = (0..n)
        .map(|i| ImageRecord {
            id: format!("img{i:04}"),
            uri: format!("file:///synthetic/img{i:04}.png"),
        })
        .collect();
    let bank = ContributionBank {
        meta,
        images,
        cls_contrib: cls,
        base,
        full_repr: full,
    };

    let tokens = if spec.with_tokens {
        let t = bank.meta.tokens_per_image();
        (0..n)
            .map(|i| {
                let mut tok = Array4::<f32>::zeros((ANALYZED_LAYER_COUNT, h, t, d));
                tok.iter_mut().for_each(|v| *v = quantize(normal(&mut rng)));
                ImageTokens {
                    image_id: bank.images[i].id.clone(),
                    tokens: tok,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    SyntheticFixture {
        bank,
        tokens,
        texts,
    }
}
