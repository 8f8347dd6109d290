//! Face corpus data model: records, labels, manifests, and the splitters that
//! build held-out test sets and k-shot fine-tuning sets.

mod crop;
mod ingest;
mod split;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use crop::{normalize_crop, normalize_manifest, BBox, BBoxTable, FaceDetector, FullFrame, FACE_HEIGHT, FACE_WIDTH};
pub use ingest::{ingest, read_labels, LabelRow};
pub use split::{build_holdout, sample_kshot, SplitSpec};
pub use store::{FileStore, ImageStore, MemoryStore};

pub const SCHEMA_VERSION: u32 = 1;

/// Country code, stored upper-case (`"IND"`, `"AUS"`, ...).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Country(String);

impl Country {
    pub const CANONICAL: [&'static str; 8] = ["AUS", "NZL", "ENG", "RSA", "BAN", "IND", "PAK", "WIN"];

    pub fn new(code: &str) -> Self {
        Self(code.trim().to_ascii_uppercase())
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    pub fn canonical() -> Vec<Country> {
        Self::CANONICAL.iter().map(|c| Country::new(c)).collect()
    }
}

impl fmt::Display for Country {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    GlobalNorth,
    GlobalSouth,
}

impl Region {
    pub fn short(self) -> &'static str {
        match self {
            Region::GlobalNorth => "GN",
            Region::GlobalSouth => "GS",
        }
    }

    /// Region of one of the eight canonical countries.
    pub fn of_canonical(code: &str) -> Option<Region> {
        match code {
            "AUS" | "NZL" | "ENG" | "RSA" => Some(Region::GlobalNorth),
            "BAN" | "IND" | "PAK" | "WIN" => Some(Region::GlobalSouth),
            _ => None,
        }
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gn" | "globalnorth" | "global north" | "north" => Ok(Region::GlobalNorth),
            "gs" | "globalsouth" | "global south" | "south" => Ok(Region::GlobalSouth),
            other => Err(Error::Config(format!("unknown region `{other}`"))),
        }
    }
}

/// Perceived binary gender label as published with the source images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn short(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }

    pub fn opposite(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" | "man" => Ok(Gender::Male),
            "f" | "female" | "woman" => Ok(Gender::Female),
            other => Err(Error::BadLabel(format!("unknown gender `{other}`"))),
        }
    }
}

/// Country → region table. Starts with the eight canonical countries; any
/// further country must be declared with an explicit region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryRegistry {
    regions: BTreeMap<Country, Region>,
}

impl Default for CountryRegistry {
    fn default() -> Self {
        let regions = Country::CANONICAL
            .iter()
            .map(|c| (Country::new(c), Region::of_canonical(c).expect("canonical country")))
            .collect();
        Self { regions }
    }
}

impl CountryRegistry {
    pub fn declare(&mut self, country: Country, region: Region) -> &mut Self {
        self.regions.insert(country, region);
        self
    }

    pub fn region_of(&self, country: &Country) -> Result<Region> {
        self.regions.get(country).copied().ok_or_else(|| Error::UnknownCountry(country.to_string()))
    }

    pub fn countries(&self) -> impl Iterator<Item = &Country> {
        self.regions.keys()
    }
}

/// Adversarial filter family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Filter {
    Orig,
    Rgb,
    Grey,
    Sprd,
    Mask,
}

/// A filter plus its parameters.
///
/// `amplitude` is present iff the filter is RGB, `radius` iff it is SPRD, and
/// `seed` only for the two stochastic filters. Requested kinds usually carry
/// no seed; generated records carry the per-image seed that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVariant")]
pub struct VariantKind {
    kind: Filter,
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct RawVariant {
    kind: Filter,
    amplitude: Option<f64>,
    radius: Option<u32>,
    seed: Option<u64>,
}

impl TryFrom<RawVariant> for VariantKind {
    type Error = Error;

    fn try_from(raw: RawVariant) -> Result<Self> {
        let v = VariantKind { kind: raw.kind, amplitude: raw.amplitude, radius: raw.radius, seed: raw.seed };
        v.validate()?;
        Ok(v)
    }
}

impl VariantKind {
    pub const DEFAULT_SPREAD_RADIUS: u32 = 5;

    pub fn orig() -> Self {
        Self { kind: Filter::Orig, amplitude: None, radius: None, seed: None }
    }

    pub fn rgb(amplitude: f64) -> Self {
        Self { kind: Filter::Rgb, amplitude: Some(amplitude), radius: None, seed: None }
    }

    pub fn grey() -> Self {
        Self { kind: Filter::Grey, amplitude: None, radius: None, seed: None }
    }

    pub fn spread(radius: u32) -> Self {
        Self { kind: Filter::Sprd, amplitude: None, radius: Some(radius), seed: None }
    }

    pub fn mask() -> Self {
        Self { kind: Filter::Mask, amplitude: None, radius: None, seed: None }
    }

    /// Attaches a seed; ignored for deterministic filters.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if self.is_stochastic() {
            self.seed = Some(seed);
        }
        self
    }

    pub fn kind(&self) -> Filter {
        self.kind
    }

    pub fn amplitude(&self) -> Option<f64> {
        self.amplitude
    }

    pub fn radius(&self) -> Option<u32> {
        self.radius
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_orig(&self) -> bool {
        self.kind == Filter::Orig
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, Filter::Rgb | Filter::Sprd)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidVariant(format!("{:?}: {msg}", self.kind)));
        if self.amplitude.is_some() != (self.kind == Filter::Rgb) {
            return bad("amplitude is required for RGB and forbidden otherwise");
        }
        if self.radius.is_some() != (self.kind == Filter::Sprd) {
            return bad("radius is required for SPRD and forbidden otherwise");
        }
        if self.seed.is_some() && !self.is_stochastic() {
            return bad("only RGB and SPRD take a seed");
        }
        if let Some(a) = self.amplitude {
            if !(0.0..=1.0).contains(&a) {
                return bad("amplitude must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Stable short name of the filter and its parameters, seed excluded
    /// (`ORIG`, `RGB0.3`, `GREY`, `SPRD5`, `MASK`).
    pub fn tag(&self) -> String {
        match self.kind {
            Filter::Orig => "ORIG".into(),
            Filter::Rgb => format!("RGB{}", self.amplitude.unwrap_or_default()),
            Filter::Grey => "GREY".into(),
            Filter::Sprd => format!("SPRD{}", self.radius.unwrap_or_default()),
            Filter::Mask => "MASK".into(),
        }
    }

    /// Same filter and parameters, ignoring the seed.
    pub fn same_filter(&self, other: &VariantKind) -> bool {
        self.tag() == other.tag()
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    /// Parses tags such as `orig`, `rgb0.3`, `grey`, `sprd`, `sprd3`, `mask`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parsed = match lower.as_str() {
            "orig" => VariantKind::orig(),
            "grey" | "gray" | "greyscale" => VariantKind::grey(),
            "mask" | "masked" => VariantKind::mask(),
            "sprd" | "spread" => VariantKind::spread(Self::DEFAULT_SPREAD_RADIUS),
            _ if lower.starts_with("rgb") => {
                let a = lower[3..].trim_start_matches(['_', '-']);
                let amplitude: f64 =
                    a.parse().map_err(|_| Error::InvalidVariant(format!("bad RGB amplitude in `{s}`")))?;
                VariantKind::rgb(amplitude)
            }
            _ if lower.starts_with("sprd") || lower.starts_with("spread") => {
                let digits = lower.trim_start_matches(|c: char| c.is_ascii_alphabetic() || c == '_' || c == '-');
                let radius: u32 =
                    digits.parse().map_err(|_| Error::InvalidVariant(format!("bad spread radius in `{s}`")))?;
                VariantKind::spread(radius)
            }
            _ => return Err(Error::InvalidVariant(format!("unknown variant `{s}`"))),
        };
        parsed.validate()?;
        Ok(parsed)
    }
}

/// One labeled face image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub record_id: String,
    pub identity_id: String,
    pub display_name: String,
    pub country: Country,
    pub region: Region,
    pub gender: Gender,
    pub variant: VariantKind,
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
}

impl FaceRecord {
    pub fn make_id(identity_id: &str, variant: &VariantKind) -> String {
        format!("{identity_id}:{}", variant.tag())
    }

    /// Copy of this record describing a derived variant image.
    pub fn derive_variant(&self, variant: VariantKind, image_ref: String) -> FaceRecord {
        FaceRecord { record_id: Self::make_id(&self.identity_id, &variant), variant, image_ref, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub provenance: String,
    pub records: Vec<FaceRecord>,
}

impl Manifest {
    pub fn new(provenance: impl Into<String>, records: Vec<FaceRecord>) -> Result<Self> {
        let m = Self { schema_version: SCHEMA_VERSION, provenance: provenance.into(), records };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(provenance: impl Into<String>) -> Self {
        Self { schema_version: SCHEMA_VERSION, provenance: provenance.into(), records: Vec::new() }
    }

    /// Checks record-id uniqueness and one record per (identity, variant).
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut pairs = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.record_id.as_str()) {
                return Err(Error::DuplicateIdentityVariant {
                    identity: r.identity_id.clone(),
                    variant: r.variant.tag(),
                });
            }
            if !pairs.insert((r.identity_id.as_str(), r.variant.tag())) {
                return Err(Error::DuplicateIdentityVariant {
                    identity: r.identity_id.clone(),
                    variant: r.variant.tag(),
                });
            }
            if Region::of_canonical(r.country.code()).is_some_and(|reg| reg != r.region) {
                return Err(Error::BadLabel(format!(
                    "record `{}` has region {:?} but {} is {:?}",
                    r.record_id,
                    r.region,
                    r.country,
                    Region::of_canonical(r.country.code()).unwrap()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// `image_ref`s that do not point at an existing file.
    pub fn unresolved_refs(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| !Path::new(&r.image_ref).is_file())
            .map(|r| r.image_ref.as_str())
            .collect()
    }

    pub fn orig(&self) -> impl Iterator<Item = &FaceRecord> {
        self.records.iter().filter(|r| r.variant.is_orig())
    }

    pub fn identities(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.identity_id.as_str()).collect()
    }

    pub fn countries(&self) -> BTreeSet<Country> {
        self.records.iter().map(|r| r.country.clone()).collect()
    }

    pub fn find(&self, identity: &str, kind: &VariantKind) -> Option<&FaceRecord> {
        self.records.iter().find(|r| r.identity_id == identity && r.variant.same_filter(kind))
    }

    /// Records of one variant set.
    pub fn variant_set(&self, kind: &VariantKind) -> Manifest {
        self.filtered(format!("{} [{}]", self.provenance, kind.tag()), |r| r.variant.same_filter(kind))
    }

    /// Every record of `source` belonging to an identity in this manifest.
    pub fn expand_from(&self, source: &Manifest) -> Manifest {
        let ids = self.identities();
        source.filtered(format!("{} (all variants)", self.provenance), |r| ids.contains(r.identity_id.as_str()))
    }

    pub fn filtered(&self, provenance: String, keep: impl Fn(&FaceRecord) -> bool) -> Manifest {
        Manifest {
            schema_version: self.schema_version,
            provenance,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// SHA-256 over the canonical JSON of the records, in record-id order.
    pub fn content_hash(&self) -> String {
        let mut sorted: Vec<&FaceRecord> = self.records.iter().collect();
        sorted.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let mut hasher = Sha256::new();
        for r in sorted {
            hasher.update(serde_json::to_vec(r).expect("records serialize"));
        }
        hex::encode(hasher.finalize())
    }

    /// Record counts keyed by (region, gender).
    pub fn region_gender_counts(&self) -> BTreeMap<(Region, Gender), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry((r.region, r.gender)).or_insert(0) += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_regions() {
        let reg = CountryRegistry::default();
        let north: Vec<_> = ["AUS", "NZL", "ENG", "RSA"].iter().map(|c| Country::new(c)).collect();
        let south: Vec<_> = ["BAN", "IND", "PAK", "WIN"].iter().map(|c| Country::new(c)).collect();
        for c in &north {
            assert_eq!(reg.region_of(c).unwrap(), Region::GlobalNorth);
        }
        for c in &south {
            assert_eq!(reg.region_of(c).unwrap(), Region::GlobalSouth);
        }
        assert!(matches!(reg.region_of(&Country::new("SL")), Err(Error::UnknownCountry(_))));
    }

    #[test]
    fn extended_country_requires_declaration() {
        let mut reg = CountryRegistry::default();
        let sl = Country::new("sl");
        assert!(reg.region_of(&sl).is_err());
        reg.declare(sl.clone(), Region::GlobalSouth);
        assert_eq!(reg.region_of(&sl).unwrap(), Region::GlobalSouth);
    }

    #[test]
    fn variant_invariants_enforced_on_deserialize() {
        let ok: VariantKind = serde_json::from_str(r#"{"kind":"RGB","amplitude":0.3,"seed":4}"#).unwrap();
        assert_eq!(ok.tag(), "RGB0.3");
        assert!(serde_json::from_str::<VariantKind>(r#"{"kind":"ORIG","amplitude":0.3}"#).is_err());
        assert!(serde_json::from_str::<VariantKind>(r#"{"kind":"RGB"}"#).is_err());
        assert!(serde_json::from_str::<VariantKind>(r#"{"kind":"SPRD"}"#).is_err());
        assert!(serde_json::from_str::<VariantKind>(r#"{"kind":"GREY","seed":1}"#).is_err());
        let orig = serde_json::to_string(&VariantKind::orig()).unwrap();
        assert_eq!(orig, r#"{"kind":"ORIG"}"#);
    }

    #[test]
    fn variant_tags_parse_back() {
        for v in [
            VariantKind::orig(),
            VariantKind::rgb(0.3),
            VariantKind::rgb(0.5),
            VariantKind::grey(),
            VariantKind::spread(5),
            VariantKind::mask(),
        ] {
            let parsed: VariantKind = v.tag().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert_eq!("sprd".parse::<VariantKind>().unwrap(), VariantKind::spread(5));
        assert!("blur".parse::<VariantKind>().is_err());
    }

    #[test]
    fn seed_does_not_change_filter_identity() {
        let a = VariantKind::rgb(0.3).with_seed(1);
        let b = VariantKind::rgb(0.3).with_seed(2);
        assert!(a.same_filter(&b));
        assert_ne!(a, b);
        assert_eq!(VariantKind::grey().with_seed(9).seed(), None);
    }
}
