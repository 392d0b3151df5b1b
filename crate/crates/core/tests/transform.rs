use clknn::{AdapterParams, Datastore, Entry, Error};

fn store() -> Datastore {
    let entries = vec![
        Entry::new(vec![1.5, -2.0], 0),
        Entry::new(vec![-0.25, 3.0], 2),
        Entry::new(vec![0.0, 0.0], 1),
        Entry::new(vec![7.0, 0.125], 2),
    ];
    Datastore::build(entries, 2, 3).unwrap()
}

#[test]
fn zero_weights_give_constant_keys() {
    let mut p = AdapterParams::zeros(2, 3, 2);
    p.b2 = vec![0.5, -0.5];
    let z = store().transform(&p).unwrap();
    for i in 0..z.len() {
        assert_eq!(z.key(i), &[0.5, -0.5]);
    }
}

#[test]
fn split_relu_identity() {
    // [I, -I] then [I; -I]: relu(h) - relu(-h) = h.
    let w1 = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
    let w2 = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
    let p = AdapterParams::from_parts(2, 4, 2, w1, vec![0.0; 4], w2, vec![0.0; 2]).unwrap();
    let ds = store();
    let z = ds.transform(&p).unwrap();
    assert_eq!(z.keys(), ds.keys());
}

#[test]
fn shifted_bias_identity() {
    // h + c stays positive for every key, so ReLU is inactive and b2 undoes the shift.
    let c = 100.0;
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    let p = AdapterParams::from_parts(2, 2, 2, eye.clone(), vec![c, c], eye, vec![-c, -c]).unwrap();
    let ds = store();
    let z = ds.transform(&p).unwrap();
    for (a, b) in z.keys().iter().zip(ds.keys()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn tokens_preserved_and_width_changes() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let p = AdapterParams::init(2, 5, 4, &mut rng);
    let ds = store();
    let z = ds.transform(&p).unwrap();
    assert_eq!(z.dim(), 4);
    assert_eq!(z.tokens(), ds.tokens());
    assert_eq!(z.vocab_size(), ds.vocab_size());
    for i in 0..ds.len() {
        let expect: Vec<f32> = p
            .forward(&ds.key_f64(i))
            .unwrap()
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert_eq!(z.key(i), expect.as_slice());
    }
}

#[test]
fn width_mismatch() {
    let p = AdapterParams::zeros(3, 2, 2);
    assert!(matches!(
        store().transform(&p),
        Err(Error::DimensionMismatch {
            expected: 3,
            found: 2
        })
    ));
}
