use std::collections::HashSet;

use sk_unet::metrics::evaluate;
use sk_unet::phantom::{
    disk_area, generate_dataset, generate_patient, lens_area, patient_spec, DatasetConfig, PhantomBounds,
    MANIFEST, MIN_SIZE,
};
use sk_unet::postprocess::largest_cc_constraint;
use sk_unet::volume::{list_image_ids, read_labels, read_patient, SequenceTag, LV, LVM, RV};

fn patient(index: usize) -> sk_unet::phantom::PhantomPatient {
    let spec = patient_spec(&PhantomBounds::for_size(96), 42, index).unwrap();
    generate_patient("P", &spec).unwrap()
}

#[test]
fn class_areas_follow_the_geometry() {
    for i in 0..10 {
        let p = patient(i);
        let d = p.labels.dims;
        for s in 0..d.slices {
            let g = p.spec.slice_geometry(s);
            let sl = &p.labels.slice(s);
            let count = |k: u8| sl.iter().filter(|l| **l == k).count() as f64;
            let rv_d = (g.rv_center.0 - p.spec.center_row).hypot(g.rv_center.1 - p.spec.center_col);
            let want = [
                (LV, disk_area(g.lv_radius)),
                (LVM, disk_area(g.epi_radius) - disk_area(g.lv_radius)),
                (RV, disk_area(g.rv_radius) - lens_area(g.rv_radius, g.epi_radius, rv_d)),
            ];
            for (k, area) in want {
                let got = count(k);
                assert!((got - area).abs() <= 0.2 * area, "patient {i} slice {s} class {k}: {got} vs {area:.1}");
            }
        }
    }
}

#[test]
fn lesions_are_as_bright_as_blood() {
    let mut checked = 0;
    for i in 0..10 {
        let p = patient(i);
        let lge = &p.volumes[2];
        assert_eq!(lge.sequence, SequenceTag::Lge);
        let mean = |sel: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..lge.data.len()).filter(|j| sel(*j)).map(|j| lge.data[j] as f64).collect();
            (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
        };
        let (lesion, n) = mean(&|j| p.lesion_mask[j]);
        let (blood, _) = mean(&|j| p.labels.labels[j] == LV);
        let (healthy, _) = mean(&|j| p.labels.labels[j] == LVM && !p.lesion_mask[j]);
        if n == 0 {
            continue;
        }
        checked += 1;
        assert!((lesion - blood).abs() <= 0.1 * blood, "patient {i}: lesion {lesion:.1} blood {blood:.1}");
        assert!(healthy < 0.5 * blood);
        assert!(p.lesion_mask.iter().zip(&p.labels.labels).all(|(m, l)| !m || *l == LVM));
    }
    assert!(checked >= 5);
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(patient(3), patient(3));
    assert_ne!(patient(3).volumes[0].data, patient(4).volumes[0].data);
}

#[test]
fn every_slice_shows_every_class_in_one_piece() {
    for i in 0..20 {
        let p = patient(i);
        for s in 0..p.labels.dims.slices {
            for k in [LV, LVM, RV] {
                assert!(p.labels.slice(s).contains(&k), "patient {i} slice {s} lacks {k}");
            }
        }
        assert_eq!(largest_cc_constraint(&p.labels).0, p.labels);
        let r = evaluate(&p.labels, &p.labels).unwrap();
        assert_eq!(r.dice, [1.0; 3]);
    }
}

#[test]
fn default_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::default();
    generate_dataset(&cfg, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    let rows: Vec<Vec<&str>> = manifest.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 70);
    let ids = |split: &str| -> HashSet<String> {
        rows.iter().filter(|r| r[2] == split).map(|r| r[0].to_string()).collect()
    };
    let (train, val) = (ids("train"), ids("val"));
    assert_eq!((train.len(), val.len()), (60, 10));
    assert!(train.is_disjoint(&val));
    for (split, set) in [("train", &train), ("val", &val)] {
        for tag in ["cine", "t2", "lge"] {
            let d = dir.path().join(split).join(tag);
            let found: HashSet<String> = list_image_ids(&d).unwrap().into_iter().collect();
            assert_eq!(&found, set);
        }
    }
    let v = read_patient(&dir.path().join("val/lge"), "P061").unwrap();
    let l = read_labels(&dir.path().join("val/lge"), "P061").unwrap();
    assert_eq!((v.dims, v.sequence), (l.dims, SequenceTag::Lge));
    assert_eq!((v.dims.rows, v.dims.cols), (96, 96));
    assert!(generate_dataset(&cfg, dir.path()).is_err());
    generate_dataset(&DatasetConfig { overwrite: true, n_train: 1, n_val: 1, ..cfg }, dir.path()).unwrap();
    assert_eq!(list_image_ids(&dir.path().join("train/cine")).unwrap().len(), 1);
}

#[test]
fn smallest_size_is_feasible() {
    let b = PhantomBounds::for_size(MIN_SIZE);
    for i in 0..70 {
        patient_spec(&b, 42, i).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        size: MIN_SIZE - 2,
        ..DatasetConfig::default()
    };
    assert!(generate_dataset(&cfg, dir.path()).is_err());
}
