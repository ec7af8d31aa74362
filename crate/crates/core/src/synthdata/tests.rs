use super::*;
use crate::metrics::roc_auc_scores;

#[test]
fn label_follows_highest_gleason_score() {
    assert_eq!(derive_label(&[7]).unwrap(), 1);
    assert_eq!(derive_label(&[6]).unwrap(), 0);
    assert_eq!(derive_label(&[3, 6, 8]).unwrap(), 1);
    assert_eq!(derive_label(&[2, 6, 6]).unwrap(), 0);
    assert!(derive_label(&[]).is_err());
    assert!(derive_label(&[11]).is_err());
    assert!(derive_label(&[1, 7]).is_err());
}

#[test]
fn phantoms_are_deterministic_and_clamped() {
    let c = PhantomConfig::default();
    let a = generate_phantom(&c, 1, &mut seeded(4)).unwrap();
    let b = generate_phantom(&c, 1, &mut seeded(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_phantom(&c, 1, &mut seeded(5)).unwrap());
    assert!(a.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.dims(), c.dims);
}

#[test]
fn positive_twin_differs_only_inside_the_lesion() {
    let c = PhantomConfig::default();
    for seed in 0..20 {
        let pos = generate_phantom_with_geometry(&c, 1, &mut seeded(seed)).unwrap();
        let neg = generate_phantom_with_geometry(&c, 0, &mut seeded(seed)).unwrap();
        assert_eq!(pos.organ, neg.organ);
        assert!(neg.lesion.is_none());
        let lesion = pos.lesion.unwrap();
        let mask = lesion.mask(c.dims);
        assert!(mask.iter().any(|&m| m), "empty lesion for seed {seed}");
        let organ = pos.organ.mask(c.dims);
        for (i, (p, n)) in pos.volume.voxels().iter().zip(neg.volume.voxels()).enumerate() {
            if p != n {
                assert!(mask[i]);
            }
            if mask[i] {
                assert!(organ[i], "lesion voxel {i} outside the organ");
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = PhantomConfig {
        lesion_radii_max: [5.0, 2.0, 7.2],
        ..PhantomConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = PhantomConfig {
        lesion_delta: 0.0,
        ..PhantomConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(generate_phantom(&PhantomConfig::default(), 2, &mut seeded(0)).is_err());
}

/// Mean intensity inside the organ as a classifier score.
#[test]
fn organ_intensity_separates_the_classes() {
    let c = PhantomConfig::default();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for i in 0..100u64 {
        let label = (i % 2) as u8;
        let p = generate_phantom_with_geometry(&c, label, &mut seeded(derive_seed(1, &i.to_string()))).unwrap();
        let organ = p.organ.mask(c.dims);
        let inside: Vec<f64> = p
            .volume
            .voxels()
            .iter()
            .zip(&organ)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| f64::from(v))
            .collect();
        labels.push(label);
        scores.push(inside.iter().sum::<f64>() / inside.len() as f64);
    }
    let auc = roc_auc_scores(&labels, &scores).unwrap();
    assert!(auc > 0.6, "auc {auc}");
}

#[test]
fn dataset_counts_and_determinism() {
    let c = PhantomConfig {
        dims: [16, 16, 8],
        ..PhantomConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generate_dataset(&c, 5, 20, 0.5, 3, a.path()).unwrap();
    generate_dataset(&c, 5, 20, 0.5, 3, b.path()).unwrap();
    assert_eq!(da.labeled.labels().iter().filter(|&&l| l == 1).count(), 10);
    assert_eq!(da.unlabeled.len(), 5);

    let ua: std::collections::HashSet<_> = da.unlabeled.records.iter().map(|r| r.id.clone()).collect();
    assert!(da.labeled.ids().iter().all(|id| !ua.contains(id)));

    let read = LabeledManifest::read(&da.labeled_path).unwrap();
    assert_eq!(read.records, da.labeled.records);
    assert_eq!(read.load_volumes().unwrap().len(), 20);

    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walk(a.path()) {
        files.push(entry.strip_prefix(a.path()).unwrap().to_path_buf());
    }
    assert_eq!(files.len(), 2 + 2 * 25);
    for f in files {
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap(), "{f:?}");
    }

    let odd = generate_dataset(&c, 0, 7, 0.5, 3, a.path().join("odd")).unwrap();
    // 3.5 rounds half up
    assert_eq!(odd.labeled.labels().iter().filter(|&&l| l == 1).count(), 4);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}
