//! Synthetic corpora and the desk-scale mitigation experiments.
//!
//! Toy faces are small (24×32) renders: a skin-toned ellipse on a noisy
//! background, with a class feature whose strength is drawn per identity.
//! The gender corpus plants a spurious cue (a bright corner patch): in the
//! source data it marks most male and few female identities, while in the
//! deployment data every image carries it. A model pretrained on the source
//! data reads the cue as "male" and under-serves women on deployment images.
//!
//! The country corpus renders four countries, each with its own feature
//! pattern, at two source/target tint conditions.

mod experiments;

pub use experiments::{
    contrastive_experiment, country_experiment, gender_setup, kshot_experiment, ContrastiveToyReport, CountryToyReport,
    CountryToyParams, GenderSetup, GenderToyParams, KshotToyReport, ToyRun,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Country, FaceRecord, Gender, Manifest, MemoryStore, Region, VariantKind};
use crate::error::Result;
use crate::imagebuf::ImageBuffer;
use crate::model::{ClassifierConfig, ConvBlock};
use crate::seed;
use crate::variants::{rgb_noise, variant_seed};

pub const TOY_WIDTH: u32 = 24;
pub const TOY_HEIGHT: u32 = 32;

/// Countries used by the gender toy: the canonical eight.
pub fn gender_countries() -> Vec<(Country, Region)> {
    Country::CANONICAL
        .iter()
        .map(|c| (Country::new(c), Region::of_canonical(c).expect("canonical country has a region")))
        .collect()
}

/// Countries used by the country toy.
pub const TOY_COUNTRIES: [&str; 4] = ["AUS", "ENG", "IND", "RSA"];

/// Small two-block CNN over 24×32 inputs with a 128-unit embedding.
pub fn toy_classifier(class_names: Vec<String>, weight_init_seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        input_width: TOY_WIDTH,
        input_height: TOY_HEIGHT,
        conv_blocks: vec![ConvBlock { filters: 16, kernel: 3, pool: true }, ConvBlock { filters: 32, kernel: 3, pool: true }],
        head: vec![128],
        class_names,
        weight_init_seed,
    }
}

/// Manifest plus in-memory pixels.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub manifest: Manifest,
    pub store: MemoryStore,
}

impl ToyCorpus {
    fn new(provenance: &str) -> Self {
        Self { manifest: Manifest::empty(provenance), store: MemoryStore::new() }
    }

    fn push(&mut self, record: FaceRecord, image: ImageBuffer) {
        self.store.insert(record.image_ref.clone(), image);
        self.manifest.records.push(record);
    }

    /// Adds an RGB-noise variant record for every ORIG record.
    fn add_rgb_variants(&mut self, amplitude: f64, master_seed: u64) -> Result<()> {
        let kind = VariantKind::rgb(amplitude);
        let origs: Vec<FaceRecord> = self.manifest.orig().cloned().collect();
        for r in origs {
            let s = variant_seed(master_seed, &r.identity_id, &kind);
            let kind = kind.clone().with_seed(s);
            let img = rgb_noise(self.store.get(&r.image_ref).expect("orig image stored"), amplitude, s)?;
            let image_ref = format!("mem://{}", FaceRecord::make_id(&r.identity_id, &kind));
            self.push(r.derive_variant(kind, image_ref), img);
        }
        Ok(())
    }
}

fn record(identity: String, country: &Country, region: Region, gender: Gender) -> FaceRecord {
    let variant = VariantKind::orig();
    FaceRecord {
        record_id: FaceRecord::make_id(&identity, &variant),
        image_ref: format!("mem://{identity}/orig"),
        display_name: identity.clone(),
        identity_id: identity,
        country: country.clone(),
        region,
        gender,
        variant,
        width: TOY_WIDTH,
        height: TOY_HEIGHT,
    }
}

/// Per-identity appearance; rendering adds per-image noise on top.
struct Face {
    skin: [f64; 3],
    cx: f64,
    cy: f64,
}

fn face(rng: &mut impl Rng, region: Region) -> Face {
    let base: [f64; 3] = match region {
        Region::GlobalNorth => [0.86, 0.72, 0.62],
        Region::GlobalSouth => [0.58, 0.42, 0.32],
    };
    let j: f64 = rng.gen_range(-0.06..0.06);
    Face {
        skin: base.map(|v| (v + j + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)),
        cx: 11.5 + rng.gen_range(-1.0..1.0),
        cy: 16.5 + rng.gen_range(-1.0..1.0),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders `face` with `feature(x, y) -> darkening` applied inside the frame
/// and an optional bright corner cue.
fn render(face: &Face, noise_seed: u64, noise: f64, cue: bool, feature: impl Fn(f64, f64) -> f64) -> ImageBuffer {
    let mut rng = seed::rng(noise_seed);
    ImageBuffer::from_fn(TOY_WIDTH, TOY_HEIGHT, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let inside = ((fx - face.cx) / 8.5).powi(2) + ((fy - face.cy) / 11.5).powi(2) <= 1.0;
        let mut rgb = if inside { face.skin } else { [0.45, 0.5, 0.55] };
        let d = feature(fx - face.cx, fy - face.cy);
        rgb = rgb.map(|v| v * (1.0 - d));
        if cue && x < 4 && y < 4 {
            rgb = [1.0, 0.95, 0.2];
        }
        rgb.map(|v| to_u8(if noise > 0.0 { v + rng.gen_range(-noise..noise) } else { v }))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenderCorpusSpec {
    /// Identity id prefix, keeping corpora disjoint.
    pub prefix: String,
    pub males_per_country: usize,
    pub females_per_country: usize,
    /// Probability that an identity's image carries the corner cue.
    pub cue_male: f64,
    pub cue_female: f64,
    /// Mean darkening of the gender feature.
    pub signal: f64,
    /// Per-pixel uniform noise half-width.
    pub noise: f64,
    pub seed: u64,
}

/// Gender toy: men have a darker lower face (beard band), women darker side
/// columns (hair). Each identity also gets an RGB₀.₃ variant record.
pub fn gender_corpus(spec: &GenderCorpusSpec) -> Result<ToyCorpus> {
    let mut corpus = ToyCorpus::new(&format!("toy-gender:{}", spec.prefix));
    for (country, region) in gender_countries() {
        for (gender, count, cue_rate) in [
            (Gender::Male, spec.males_per_country, spec.cue_male),
            (Gender::Female, spec.females_per_country, spec.cue_female),
        ] {
            for i in 0..count {
                let id = format!("{}-{}-{}{i:03}", spec.prefix, country.code(), gender.short());
                let mut rng = seed::rng(seed::derive(spec.seed, &[&id]));
                let f = face(&mut rng, region);
                let strength = spec.signal * rng.gen_range(0.4..1.6);
                let cue = rng.gen::<f64>() < cue_rate;
                let img = render(&f, rng.gen(), spec.noise, cue, |dx, dy| match gender {
                    Gender::Male if (4.0..9.0).contains(&dy) && dx.abs() < 6.0 => strength,
                    Gender::Female if (-9.0..6.0).contains(&dy) && (6.0..9.5).contains(&dx.abs()) => strength,
                    _ => 0.0,
                });
                corpus.push(record(id, &country, region, gender), img);
            }
        }
    }
    corpus.add_rgb_variants(0.3, spec.seed)?;
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryCorpusSpec {
    pub prefix: String,
    /// Identities per (country, gender) cell, one entry per country of
    /// [`TOY_COUNTRIES`].
    pub per_cell: [usize; 4],
    pub signal: f64,
    pub noise: f64,
    /// Colour cast multiplied into every pixel (source vs target capture
    /// conditions).
    pub tint: [f64; 3],
    pub seed: u64,
}

/// Country toy: each of [`TOY_COUNTRIES`] darkens a different facial
/// patch (brow, left cheek, right cheek, chin).
pub fn country_corpus(spec: &CountryCorpusSpec) -> Result<ToyCorpus> {
    let mut corpus = ToyCorpus::new(&format!("toy-country:{}", spec.prefix));
    for (ci, code) in TOY_COUNTRIES.iter().enumerate() {
        let country = Country::new(code);
        let region = Region::of_canonical(code).expect("canonical country");
        for gender in Gender::ALL {
            for i in 0..spec.per_cell[ci] {
                let id = format!("{}-{code}-{}{i:03}", spec.prefix, gender.short());
                let mut rng = seed::rng(seed::derive(spec.seed, &[&id]));
                let tone = if rng.gen::<bool>() { Region::GlobalNorth } else { Region::GlobalSouth };
                let f = face(&mut rng, tone);
                let strength = spec.signal * rng.gen_range(0.4..1.6);
                let mut img = render(&f, rng.gen(), spec.noise, false, |dx, dy| {
                    let hit = match ci {
                        0 => (-8.0..-4.0).contains(&dy) && dx.abs() < 5.0,
                        1 => (-2.0..3.0).contains(&dy) && (-7.0..-2.5).contains(&dx),
                        2 => (-2.0..3.0).contains(&dy) && (2.5..7.0).contains(&dx),
                        _ => (7.0..11.0).contains(&dy) && dx.abs() < 4.0,
                    };
                    if hit {
                        strength
                    } else {
                        0.0
                    }
                });
                for px in img.pixels_mut().chunks_exact_mut(3) {
                    for c in 0..3 {
                        px[c] = to_u8(px[c] as f64 / 255.0 * spec.tint[c]);
                    }
                }
                corpus.push(record(id, &country, region, gender), img);
            }
        }
    }
    corpus.add_rgb_variants(0.3, spec.seed)?;
    Ok(corpus)
}
