mod oracles;

use oracles::{bfs_components, flood_fill_holes};
use proptest::prelude::*;
use sk_unet::postprocess::{
    connected_components, fill_holes_2d, foreground_components, largest_cc_constraint, Connectivity,
};
use sk_unet::volume::{Dims, LabelVolume, Spacing, LV, LVM, RV};

const ALL_CONN: [Connectivity; 4] = [
    Connectivity::Four,
    Connectivity::Eight,
    Connectivity::Six,
    Connectivity::TwentySix,
];

fn arb_mask() -> impl Strategy<Value = (Vec<bool>, Dims)> {
    (1usize..=8, 1usize..=16, 1usize..=16, 0.1f64..0.7).prop_flat_map(|(s, r, c, p)| {
        prop::collection::vec(prop::bool::weighted(p), s * r * c).prop_map(move |m| (m, Dims::new(s, r, c)))
    })
}

fn arb_labels() -> impl Strategy<Value = LabelVolume> {
    (1usize..=8, 1usize..=16, 1usize..=16).prop_flat_map(|(s, r, c)| {
        prop::collection::vec(prop::sample::select(vec![0u8, 0, 0, LV, LVM, RV]), s * r * c)
            .prop_map(move |l| LabelVolume::new("T", Spacing::isotropic(), Dims::new(s, r, c), l).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn components_match_bfs((mask, dims) in arb_mask()) {
        for conn in ALL_CONN {
            let cc = connected_components(&mask, dims, conn);
            let (labels, sizes) = bfs_components(&mask, dims, conn);
            prop_assert_eq!(&cc.labels, &labels, "{:?}", conn);
            prop_assert_eq!(&cc.sizes, &sizes, "{:?}", conn);
        }
    }

    #[test]
    fn hole_fill_matches_flood_fill((mask, dims) in arb_mask()) {
        let p = dims.plane();
        for s in 0..dims.slices {
            let m = &mask[s * p..(s + 1) * p];
            prop_assert_eq!(fill_holes_2d(m, dims.rows, dims.cols), flood_fill_holes(m, dims.rows, dims.cols));
        }
    }

    #[test]
    fn constraint_keeps_one_filled_component(lv in arb_labels()) {
        let (out, empty) = largest_cc_constraint(&lv);
        let fg: Vec<bool> = lv.labels.iter().map(|l| *l != 0).collect();
        prop_assert_eq!(empty, !fg.iter().any(|x| *x));
        if empty {
            prop_assert_eq!(out, lv);
            return Ok(());
        }
        let (labels, sizes) = bfs_components(&fg, lv.dims, Connectivity::TwentySix);
        let best = sizes.iter().enumerate().fold(0, |b, (k, s)| if *s > sizes[b] { k } else { b }) as u32 + 1;
        let kept: Vec<bool> = labels.iter().map(|l| *l == best).collect();
        let p = lv.dims.plane();
        for s in 0..lv.dims.slices {
            let want = flood_fill_holes(&kept[s * p..(s + 1) * p], lv.dims.rows, lv.dims.cols);
            for (i, w) in want.iter().enumerate() {
                let j = s * p + i;
                prop_assert_eq!(out.labels[j] != 0, *w);
                if kept[j] {
                    prop_assert_eq!(out.labels[j], lv.labels[j]);
                }
            }
        }
        prop_assert_eq!(foreground_components(&out), 1);
        let (again, _) = largest_cc_constraint(&out);
        prop_assert_eq!(again, out);
    }
}

/// A three-slice heart: LVM ring around an LV disk with an RV blob beside
/// it, plus an island, a hole in the LV and a hole in the RV.
fn constructed() -> LabelVolume {
    let dims = Dims::new(3, 24, 24);
    let mut l = vec![0u8; dims.len()];
    for s in 0..3 {
        for r in 0..24 {
            for c in 0..24 {
                let d = (r as f64 - 10.0).hypot(c as f64 - 10.0);
                let rv = (r as f64 - 10.0).hypot(c as f64 - 18.0);
                l[dims.index(s, r, c)] = if d <= 4.0 {
                    LV
                } else if d <= 6.0 {
                    LVM
                } else if rv <= 4.0 {
                    RV
                } else {
                    0
                };
            }
        }
    }
    l[dims.index(1, 10, 10)] = 0;
    l[dims.index(1, 10, 11)] = 0;
    l[dims.index(2, 10, 19)] = 0;
    l[dims.index(0, 21, 2)] = RV;
    l[dims.index(0, 21, 3)] = RV;
    l[dims.index(2, 1, 22)] = LV;
    LabelVolume::new("T", Spacing::isotropic(), dims, l).unwrap()
}

#[test]
fn islands_go_and_holes_fill() {
    let lv = constructed();
    assert_eq!(foreground_components(&lv), 3);
    let (out, empty) = largest_cc_constraint(&lv);
    assert!(!empty);
    let d = lv.dims;
    assert_eq!(out.labels[d.index(0, 21, 2)], 0);
    assert_eq!(out.labels[d.index(2, 1, 22)], 0);
    assert_eq!(out.labels[d.index(1, 10, 10)], LV);
    assert_eq!(out.labels[d.index(1, 10, 11)], LV);
    assert_eq!(out.labels[d.index(2, 10, 19)], RV);
    assert_eq!(foreground_components(&out), 1);
    assert_eq!(largest_cc_constraint(&out).0, out);
}

#[test]
fn empty_prediction_is_reported() {
    let lv = LabelVolume::new("T", Spacing::isotropic(), Dims::new(2, 4, 4), vec![0; 32]).unwrap();
    let (out, empty) = largest_cc_constraint(&lv);
    assert!(empty);
    assert_eq!(out, lv);
}
