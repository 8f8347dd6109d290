//! Grad-CAM saliency for a biased pretrained model: per-image maps, the
//! male and female group averages, and how their mass splits over face zones.

use frs_audit::audit::GroupKey;
use frs_audit::corpus::{Gender, ImageStore};
use frs_audit::explain::{compose_grid, gradcam, group_average_map, heat_overlay, region_profile, save_npz};
use frs_audit::toy::{gender_setup, GenderToyParams};

fn main() -> frs_audit::Result<()> {
    let params = GenderToyParams::default();
    let setup = gender_setup(&params)?;
    let net = setup.pretrained.network()?;
    let out = std::env::temp_dir().join("frs-example-gradcam");
    std::fs::create_dir_all(&out)?;

    let mut tiles = Vec::new();
    let mut named = Vec::new();
    for gender in Gender::ALL {
        let records: Vec<_> = setup.holdout.records.iter().filter(|r| r.gender == gender).take(6).collect();
        let mut maps = Vec::new();
        for r in &records {
            let img = setup.deploy.store.load(&r.image_ref)?;
            let map = gradcam(&net, &img, net.config().class_index(gender.name())?, None, &r.record_id)?;
            tiles.push(heat_overlay(&img, &map)?);
            maps.push(map);
        }
        let key = GroupKey::new("toy", "ORIG", records[0].region, gender);
        let avg = group_average_map(&maps, &key)?;
        let p = region_profile(&avg);
        println!(
            "{:<6} forehead {:.2} nose {:.2} mouth {:.2} periphery {:.2} (dominant {:?})",
            gender.name(), p.forehead, p.nose, p.mouth, p.periphery, p.dominant()
        );
        named.push((gender.name().to_owned(), avg));
    }
    let refs: Vec<(&str, _)> = named.iter().map(|(n, m)| (n.as_str(), m)).collect();
    save_npz(&refs, &out.join("group_maps.npz"))?;
    compose_grid(&tiles, 6, 2)?.save_png(out.join("grid.png"))?;
    println!("wrote {} and {}", out.join("grid.png").display(), out.join("group_maps.npz").display());
    Ok(())
}
