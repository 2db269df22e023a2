use kmamba::data::{crop, flip, Volume};
use kmamba::metrics::{dice, dice_mask, iou, iou_mask, LabelVolume, Region};
use kmamba::Tensor;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..6, 1usize..6, 1usize..6]
}

fn labels(classes: u8) -> impl Strategy<Value = LabelVolume> {
    dims().prop_flat_map(move |d| {
        proptest::collection::vec(0..classes, d[0] * d[1] * d[2]).prop_map(move |l| LabelVolume::new(d, l).unwrap())
    })
}

fn case() -> impl Strategy<Value = (Tensor, LabelVolume)> {
    (1usize..3, dims()).prop_flat_map(|(m, d)| {
        let n = d[0] * d[1] * d[2];
        (
            proptest::collection::vec(-10.0f64..10.0, m * n),
            proptest::collection::vec(0u8..4, n),
        )
            .prop_map(move |(x, l)| (Tensor::from_vec(x, &[m, d[0], d[1], d[2]]), LabelVolume::new(d, l).unwrap()))
    })
}

proptest! {
    #[test]
    fn image_volume_round_trips((image, labels) in case()) {
        let v = Volume::from_image(&image, [0.5, 1.0, 2.5]).unwrap();
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        prop_assert_eq!(&back, &v);
        let restored = back.to_image().unwrap();
        for (a, b) in restored.to_vec().iter().zip(image.to_vec()) {
            prop_assert_eq!(*a, b as f32 as f64);
        }
        let lv = Volume::from_labels(&labels);
        prop_assert_eq!(Volume::from_bytes(&lv.to_bytes()).unwrap().to_labels().unwrap().labels, labels.labels);
    }

    #[test]
    fn flip_is_an_involution((image, labels) in case(), axes in any::<[bool; 3]>()) {
        let (i1, l1) = flip(&image, &labels, axes).unwrap();
        let (i2, l2) = flip(&i1, &l1, axes).unwrap();
        prop_assert_eq!(i2.to_vec(), image.to_vec());
        prop_assert_eq!(l2, labels);
    }

    #[test]
    fn full_crop_is_identity((image, labels) in case()) {
        let (i, l) = crop(&image, &labels, [0; 3], labels.dims).unwrap();
        prop_assert_eq!(i.to_vec(), image.to_vec());
        prop_assert_eq!(l, labels);
    }

    #[test]
    fn iou_follows_from_dice(a in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let d = dice_mask(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((iou_mask(&a, &b) - d / (2.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn overlap_scores_are_symmetric(pair in labels(3).prop_flat_map(|a| {
        let n = a.len();
        let d = a.dims;
        (Just(a), proptest::collection::vec(0u8..3, n).prop_map(move |l| LabelVolume::new(d, l).unwrap()))
    })) {
        let (a, b) = pair;
        for r in [Region::Foreground, Region::Label(1), Region::Label(2)] {
            match (dice(&a, &b, r), dice(&b, &a, r)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
            }
            if let (Ok(x), Ok(y)) = (iou(&a, &b, r), iou(&b, &a, r)) {
                prop_assert_eq!(x, y);
            }
        }
        prop_assert_eq!(dice(&a, &a, Region::Foreground).ok().unwrap_or(1.0), 1.0);
    }
}
