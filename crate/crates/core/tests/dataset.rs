use std::collections::HashSet;
use std::fs;

use awracle::metrics::{mean, psnr};
use awracle::synth::{build_dataset, is_validation_scene, DatasetSpec, Kind, Manifest, RowKind, Severity};

#[test]
fn layout_counts_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(10, Kind::ALL.to_vec(), 5).with_mixtures();
    let m = build_dataset(&spec, dir.path()).unwrap();
    let singles: Vec<_> = m.rows.iter().filter(|r| r.single_kind().is_some()).collect();
    assert_eq!(singles.len(), 10 * 3 * 2);
    assert_eq!(m.rows.len() - singles.len(), spec.mixtures);

    let scenes: HashSet<u64> = m.rows.iter().map(|r| r.scene_id).collect();
    assert_eq!(scenes.len(), m.rows.len(), "query scenes repeat");
    for r in &singles {
        assert!(r.is_paired());
        assert!(!scenes.contains(&r.ctx_scene_id.unwrap()), "context scene reused as a query");
    }
    for k in Kind::ALL {
        for sev in Severity::ALL {
            let cell: Vec<_> = singles.iter().filter(|r| r.single_kind() == Some(k) && r.severity == sev).collect();
            assert_eq!(cell.len(), 10);
            assert_eq!(cell.iter().filter(|r| is_validation_scene(r.scene_id)).count(), 1, "{k} {sev}");
        }
    }
    for r in m.rows.iter().filter(|r| r.kind == RowKind::Mixture) {
        let (h, s) = r.mixture_intermediates().unwrap();
        assert!(m.path(&h).exists() && m.path(&s).exists());
    }

    let reloaded = Manifest::load(dir.path()).unwrap();
    assert_eq!(reloaded.rows, m.rows);
    for r in &m.rows {
        for rel in [Some(&r.query), Some(&r.gt), r.ctx_degraded.as_ref(), r.ctx_clean.as_ref()].into_iter().flatten() {
            let img = m.load_image(rel).unwrap();
            assert_eq!(img.shape(), &[3, 32, 32], "{rel}");
        }
    }
}

#[test]
fn rebuild_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = DatasetSpec::new(3, vec![Kind::Rain, Kind::Snow], 11);
    let m = build_dataset(&spec, a.path()).unwrap();
    build_dataset(&spec, b.path()).unwrap();
    assert_eq!(fs::read(a.path().join("manifest.tsv")).unwrap(), fs::read(b.path().join("manifest.tsv")).unwrap());
    for r in &m.rows {
        assert_eq!(fs::read(a.path().join(&r.query)).unwrap(), fs::read(b.path().join(&r.query)).unwrap());
    }
    let other = tempfile::tempdir().unwrap();
    build_dataset(&DatasetSpec::new(3, vec![Kind::Rain, Kind::Snow], 12), other.path()).unwrap();
    assert_ne!(fs::read(a.path().join(&m.rows[0].query)).unwrap(), fs::read(other.path().join(&m.rows[0].query)).unwrap());
}

#[test]
fn heavy_degrades_more_than_light() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&DatasetSpec::new(8, Kind::ALL.to_vec(), 2), dir.path()).unwrap();
    for k in Kind::ALL {
        let cell = |sev| {
            let v: Vec<f64> = m
                .rows
                .iter()
                .filter(|r| r.single_kind() == Some(k) && r.severity == sev)
                .map(|r| psnr(&m.load_image(&r.query).unwrap(), &m.load_image(&r.gt).unwrap(), 1.0).unwrap())
                .collect();
            mean(&v)
        };
        let (light, heavy) = (cell(Severity::Light), cell(Severity::Heavy));
        assert!(heavy < light, "{k}: heavy {heavy:.2} light {light:.2}");
    }
}

#[test]
fn empty_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_dataset(&DatasetSpec::new(0, Kind::ALL.to_vec(), 0), dir.path()).is_err());
    assert!(build_dataset(&DatasetSpec::new(2, vec![], 0), dir.path()).is_err());
}
