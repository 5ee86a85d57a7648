use std::fs;
use std::path::Path;

use corrwarp::data::{generate, load_batch, read_manifest, Split, SynthConfig, MANIFEST_FILE};
use corrwarp::geometry::{project, Homography};
use corrwarp::imaging::{composite, Image};
use corrwarp::model::cell_centers;

fn small() -> SynthConfig {
    SynthConfig { count: 9, resolution: 32, seed: 11, ..SynthConfig::default() }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small(), a.path()).unwrap();
    generate(&small(), b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 9 * 4 + 1);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    generate(&SynthConfig { seed: 12, ..small() }, c.path()).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn stored_samples_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate(&small(), dir.path()).unwrap();
    assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), records);
    let mut train_shapes = std::collections::HashSet::new();
    let mut test_shapes = std::collections::HashSet::new();
    for r in &records {
        r.check_vertices().unwrap();
        let fg = Image::load_rgb(&dir.path().join(&r.fg_path)).unwrap();
        let mask = Image::load_mask(&dir.path().join(&r.fg_mask_path)).unwrap();
        let bg = Image::load_rgb(&dir.path().join(&r.bg_path)).unwrap();
        let gt = Image::load_rgb(&dir.path().join(r.gt_path.as_ref().unwrap())).unwrap();
        let again = composite(&fg, &mask, &bg, &r.gt_theta).unwrap().composite.quantized();
        assert_eq!(again, gt, "sample {}", r.id);
        let shape = r.shape_id.clone().unwrap();
        match r.split {
            Split::Train => train_shapes.insert(shape),
            Split::Test => test_shapes.insert(shape),
        };
    }
    assert!(train_shapes.is_disjoint(&test_shapes));
    assert_eq!(records.iter().filter(|r| r.split == Split::Test).count(), 3);
}

#[test]
fn load_batch_projects_cell_centres() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate(&small(), dir.path()).unwrap();
    let s = load_batch(dir.path(), Split::Test, 1, 32, (4, 4)).unwrap();
    let rec = records.iter().filter(|r| r.split == Split::Test).nth(1).unwrap();
    assert_eq!(&s.record, rec);
    assert_eq!(s.fg_input.shape(), &[4, 32, 32]);
    assert_eq!(s.bg_input.shape(), &[3, 32, 32]);
    let h: &Homography = &rec.gt_theta;
    for (p, c) in s.targets.points.iter().zip(cell_centers((4, 4))) {
        let q = project(h, &[c]).unwrap()[0];
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }
    assert!(load_batch(dir.path(), Split::Test, 3, 32, (4, 4)).is_err());
    assert!(load_batch(dir.path(), Split::Train, 0, 64, (8, 8)).is_err());
}
