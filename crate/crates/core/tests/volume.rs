use lsccal::volume::{
    decode_mvol, encode_mvol, extract_cuboid, extract_label_cuboid, normalize_values, Grid, LabelMask, MvolError,
    MvolObject, Volume, CUBOID_SIDE, HEADER_LEN,
};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (
        prop::array::uniform3(1usize..=16),
        prop::array::uniform3(0.05f32..4.0),
        prop::array::uniform3(-500.0f32..500.0),
    )
        .prop_map(|(d, s, o)| Grid::new(d, s, o).unwrap())
}

fn object_strategy() -> impl Strategy<Value = MvolObject> {
    (grid_strategy(), any::<bool>(), any::<u64>()).prop_map(|(grid, mask, seed)| {
        let n = grid.len();
        // cheap deterministic fill; any finite bit pattern must survive
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        if mask {
            LabelMask::new(grid, (0..n).map(|_| (next() & 1) as u8).collect()).unwrap().into()
        } else {
            let voxels = (0..n)
                .map(|_| {
                    let v = f32::from_bits(next() as u32);
                    if v.is_finite() { v } else { -0.0 }
                })
                .collect();
            Volume::new(grid, voxels).unwrap().into()
        }
    })
}

proptest! {
    #[test]
    fn mvol_round_trip_is_bit_exact(obj in object_strategy()) {
        let bytes = encode_mvol(&obj);
        let elem = if matches!(obj, MvolObject::Volume(_)) { 4 } else { 1 };
        prop_assert_eq!(bytes.len(), HEADER_LEN + elem * obj.grid().len());
        let back = decode_mvol(&bytes).unwrap();
        prop_assert_eq!(encode_mvol(&back), bytes);
        prop_assert_eq!(back.grid(), obj.grid());
    }

    #[test]
    fn world_index_round_trip(grid in grid_strategy(), frac in prop::array::uniform3(0.0f64..1.0)) {
        let idx = [0, 1, 2].map(|a| frac[a] * (grid.dims[a] - 1) as f64);
        let back = grid.index_of(&grid.world(idx));
        for a in 0..3 {
            prop_assert!((back[a] - idx[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_values_stay_in_unit_range(values in prop::collection::vec(-5000.0f32..5000.0, 1..64)) {
        let out = normalize_values(&values, (-1000.0, 3000.0)).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }
}

#[test]
fn cuboid_copies_without_touching_parent() {
    let grid = Grid::with_spacing([50, 52, 49], [0.5; 3]).unwrap();
    let vol = Volume::new(grid, (0..grid.len()).map(|i| i as f32).collect()).unwrap();
    let mask = LabelMask::new(grid, (0..grid.len()).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
    let (vol_before, mask_before) = (vol.clone(), mask.clone());
    let offset = [2, 4, 1];
    let mut c = extract_cuboid(&vol, offset).unwrap();
    let l = extract_label_cuboid(&mask, offset).unwrap();
    for (i, j, k) in [(0, 0, 0), (47, 0, 3), (5, 47, 47), (47, 47, 47)] {
        assert_eq!(c.get(i, j, k), vol.get(offset[0] + i, offset[1] + j, offset[2] + k));
        assert_eq!(l.get(i, j, k), mask.get(offset[0] + i, offset[1] + j, offset[2] + k));
    }
    c.values.iter_mut().for_each(|v| *v = -1.0);
    assert_eq!(vol, vol_before);
    assert_eq!(mask, mask_before);
    assert_eq!(c.values.len(), CUBOID_SIDE.pow(3));
    assert!(extract_cuboid(&vol, [3, 0, 0]).is_err());
}

#[test]
fn clinical_sized_payload_length() {
    let grid = Grid::with_spacing([4, 4, 4], [0.5; 3]).unwrap();
    let mut header = encode_mvol(&Volume::filled(grid, 0.0).into());
    assert_eq!(header.len(), HEADER_LEN + 64 * 4);
    assert!(header[HEADER_LEN..].iter().all(|&b| b == 0));
    // a 512 x 512 x 200 header with no payload reports the full expected size
    header.truncate(HEADER_LEN);
    for (a, d) in [512u32, 512, 200].into_iter().enumerate() {
        header[8 + 4 * a..12 + 4 * a].copy_from_slice(&d.to_le_bytes());
    }
    match decode_mvol(&header) {
        Err(MvolError::Truncated { expected, actual }) => {
            assert_eq!(expected, HEADER_LEN + 512 * 512 * 200 * 4);
            assert_eq!(actual, HEADER_LEN);
        }
        other => panic!("expected truncation, got {other:?}"),
    }
}
