use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use super::{Country, CountryRegistry, FaceRecord, Gender, Manifest, VariantKind};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

/// One row of the labels CSV (`filename,identity_id,name,country,gender`).
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct LabelRow {
    pub filename: String,
    pub identity_id: String,
    pub name: String,
    pub country: String,
    pub gender: String,
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, LabelRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row?;
        if rows.contains_key(&row.filename) {
            return Err(Error::BadLabel(format!("filename `{}` labeled twice", row.filename)));
        }
        rows.insert(row.filename.clone(), row);
    }
    Ok(rows)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        .unwrap_or(false)
}

/// Builds a manifest with one ORIG record per labeled image in `directory`.
///
/// Every image file needs a label row and every label row needs a decodable
/// image; the first violation is returned as an error naming the file.
pub fn ingest(directory: impl AsRef<Path>, labels: impl AsRef<Path>, registry: &CountryRegistry) -> Result<Manifest> {
    let directory = directory.as_ref();
    let labels = read_labels(labels)?;

    let mut files: Vec<String> = std::fs::read_dir(directory)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image(p))
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect();
    files.sort();

    if let Some(unlabeled) = files.iter().find(|f| !labels.contains_key(*f)) {
        return Err(Error::MissingLabel(unlabeled.clone()));
    }
    let present: HashSet<&str> = files.iter().map(String::as_str).collect();
    if let Some(orphan) = labels.keys().find(|f| !present.contains(f.as_str())) {
        return Err(Error::UnreadableImage {
            path: directory.join(orphan).display().to_string(),
            reason: "labeled file not found".into(),
        });
    }

    let decoded: Vec<Result<(u32, u32)>> = files
        .par_iter()
        .map(|f| ImageBuffer::open(directory.join(f)).map(|img| (img.width(), img.height())))
        .collect();

    let mut records = Vec::with_capacity(files.len());
    let mut seen = HashSet::new();
    for (file, dims) in files.iter().zip(decoded) {
        let (width, height) = dims?;
        let row = &labels[file];
        let country = Country::new(&row.country);
        let region = registry.region_of(&country)?;
        let gender: Gender = row.gender.parse()?;
        if !seen.insert(row.identity_id.clone()) {
            return Err(Error::DuplicateIdentityVariant { identity: row.identity_id.clone(), variant: "ORIG".into() });
        }
        let variant = VariantKind::orig();
        records.push(FaceRecord {
            record_id: FaceRecord::make_id(&row.identity_id, &variant),
            identity_id: row.identity_id.clone(),
            display_name: row.name.clone(),
            country,
            region,
            gender,
            variant,
            image_ref: directory.join(file).display().to_string(),
            width,
            height,
        });
    }
    Manifest::new(format!("ingested from {}", directory.display()), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Region;

    fn write_corpus(dir: &Path, countries: &[&str], per_country: &[(&str, Gender)], label_count: Option<usize>) {
        let mut csv = String::from("filename,identity_id,name,country,gender\n");
        let mut n = 0;
        for c in countries {
            for (suffix, g) in per_country {
                let file = format!("{c}_{suffix}.png");
                ImageBuffer::filled(4, 5, [n as u8, 10, 20]).save_png(dir.join(&file)).unwrap();
                if label_count.is_none_or(|max| n < max) {
                    csv.push_str(&format!("{file},{c}-{suffix},Player {n},{c},{}\n", g.short()));
                }
                n += 1;
            }
        }
        std::fs::write(dir.join("labels.csv"), csv).unwrap();
    }

    #[test]
    fn eight_labeled_images() {
        let tmp = tempfile::tempdir().unwrap();
        let imgs = tmp.path().join("imgs");
        std::fs::create_dir(&imgs).unwrap();
        write_corpus(&imgs, &["AUS", "IND", "ENG", "PAK"], &[("a", Gender::Male), ("b", Gender::Female)], None);
        let m = ingest(&imgs, imgs.join("labels.csv"), &CountryRegistry::default()).unwrap();
        assert_eq!(m.len(), 8);
        assert!(m.records.iter().all(|r| r.variant.is_orig() && r.width == 4 && r.height == 5));
    }

    #[test]
    fn missing_label_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(tmp.path(), &["AUS", "IND", "ENG", "PAK"], &[("a", Gender::Male), ("b", Gender::Female)], Some(7));
        let err = ingest(tmp.path(), tmp.path().join("labels.csv"), &CountryRegistry::default()).unwrap_err();
        match err {
            Error::MissingLabel(f) => assert_eq!(f, "PAK_b.png"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn region_counts_over_all_countries() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(tmp.path(), &Country::CANONICAL, &[("m", Gender::Male), ("f", Gender::Female)], None);
        let m = ingest(tmp.path(), tmp.path().join("labels.csv"), &CountryRegistry::default()).unwrap();
        assert_eq!(m.len(), 16);
        let gn = m.records.iter().filter(|r| r.region == Region::GlobalNorth).count();
        let gs = m.records.iter().filter(|r| r.region == Region::GlobalSouth).count();
        assert_eq!((gn, gs), (8, 8));
    }

    #[test]
    fn unreadable_image_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("bad.png"), b"not a png").unwrap();
        std::fs::write(tmp.path().join("labels.csv"), "filename,identity_id,name,country,gender\nbad.png,x,X,IND,M\n")
            .unwrap();
        let err = ingest(tmp.path(), tmp.path().join("labels.csv"), &CountryRegistry::default()).unwrap_err();
        assert!(matches!(err, Error::UnreadableImage { .. }), "{err:?}");
    }

    #[test]
    fn duplicate_identity_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        for f in ["a.png", "b.png"] {
            ImageBuffer::filled(2, 2, [1, 2, 3]).save_png(tmp.path().join(f)).unwrap();
        }
        std::fs::write(
            tmp.path().join("labels.csv"),
            "filename,identity_id,name,country,gender\na.png,x,X,IND,M\nb.png,x,X,IND,M\n",
        )
        .unwrap();
        let err = ingest(tmp.path(), tmp.path().join("labels.csv"), &CountryRegistry::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateIdentityVariant { .. }));
    }

    #[test]
    fn undeclared_country_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        ImageBuffer::filled(2, 2, [1, 2, 3]).save_png(tmp.path().join("a.png")).unwrap();
        std::fs::write(tmp.path().join("labels.csv"), "filename,identity_id,name,country,gender\na.png,x,X,SL,F\n")
            .unwrap();
        let err = ingest(tmp.path(), tmp.path().join("labels.csv"), &CountryRegistry::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownCountry(_)));
    }
}
