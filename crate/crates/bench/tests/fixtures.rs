use smap_bench::{binary_masks, observation, square};

#[test]
fn fixtures_are_deterministic_and_shaped() {
    assert_eq!(observation(3), observation(3));
    assert_ne!(observation(3), observation(4));
    assert_eq!(observation(0).shape(), &[4, 16, 16]);
    assert!(observation(0).data().iter().all(|&v| (0.0..1.0).contains(&v)));
    assert_eq!(square(8, 1).shape(), &[8, 8]);
    let (layers, out) = binary_masks(5, 3, 2);
    assert_eq!(layers.len(), 3);
    assert!(layers.iter().all(|m| m.shape() == [5, 5]));
    assert_eq!(out.shape(), &[1, 5]);
    assert!(layers.iter().flat_map(|m| m.data()).all(|&v| v == 0.0 || v == 1.0));
}
