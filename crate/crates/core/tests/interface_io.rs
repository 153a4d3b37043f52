mod common;

use common::{max_rel, uniform};
use gatekit::interface::batchnorm::{fold_batchnorm, BatchNorm};
use gatekit::interface::container::{
    decode_model, describe, encode_model, load_model, read_container, save_model, write_container,
    ArrayEntry, Dtype, Manifest, StageEntry, FORMAT_VERSION,
};
use gatekit::interface::grid::{quantize, read_raw_dump, ImageGrid, PADDING};
use gatekit::{Affine, Conv, Error, Network, Normalization, Shape, Stage};
use ndarray::{arr1, arr2, Array1, Array2, Array4};
use proptest::prelude::*;
use rand::Rng;

fn random_bn(rng: &mut impl Rng, n: usize) -> BatchNorm {
    BatchNorm {
        gamma: Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0)),
        beta: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
        mean: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
        var: Array1::from_shape_fn(n, |_| rng.random_range(0.05..3.0)),
        eps: 1e-5,
    }
}

/// Reference BN on a channel-major vector, written out independently.
fn bn_reference(bn: &BatchNorm, z: &Array1<f64>, plane: usize) -> Array1<f64> {
    Array1::from_shape_fn(z.len(), |i| {
        let c = i / plane;
        bn.gamma[c] * (z[i] - bn.mean[c]) / (bn.var[c] + bn.eps).sqrt() + bn.beta[c]
    })
}

#[test]
fn folded_affine_matches_two_stage_forward() {
    let mut rng = common::rng(1);
    let a = Affine::new(
        Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0)),
        uniform(&mut rng, 5),
    );
    let bn = random_bn(&mut rng, 5);
    let Stage::Affine(f) = fold_batchnorm(&Stage::Affine(a.clone()), &bn).unwrap() else {
        unreachable!()
    };
    for _ in 0..100 {
        let x = uniform(&mut rng, 4);
        let two = bn_reference(&bn, &(a.weight.dot(&x) + &a.bias), 1);
        let one = f.weight.dot(&x) + &f.bias;
        assert!(max_rel(&one, &two) <= 1e-9);
    }
}

#[test]
fn folded_conv_matches_two_stage_forward() {
    let mut rng = common::rng(2);
    let shape = Shape::new(2, 5, 5);
    let conv = Conv::new(
        Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random_range(-1.0..1.0)),
        uniform(&mut rng, 3),
        1,
        1,
    );
    let bn = random_bn(&mut rng, 3);
    let folded = fold_batchnorm(&Stage::Conv(conv.clone()), &bn).unwrap();
    let heads = Array2::ones((1, 75));
    let raw = Network::new(
        vec![Stage::Conv(conv), Stage::Gate { layer: 1 }],
        heads.clone(),
        shape,
    )
    .unwrap();
    let net = Network::new(vec![folded, Stage::Gate { layer: 1 }], heads, shape).unwrap();
    for _ in 0..100 {
        let x = uniform(&mut rng, 50);
        let z = &raw.forward(x.view()).unwrap().preactivations[0];
        let expected = bn_reference(&bn, z, 25);
        assert!(max_rel(&net.forward(x.view()).unwrap().preactivations[0], &expected) <= 1e-9);
    }
}

/// Container holding Affine -> BN -> Gate, written through the public manifest API.
fn bn_container(a: &Affine, bn: &BatchNorm, heads: &Array2<f64>, dtype: Dtype) -> Vec<u8> {
    let n = a.out_dim();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype,
        input_shape: [a.in_dim(), 1, 1],
        normalization: None,
        stages: vec![
            StageEntry::Affine {
                weight: "w".into(),
                bias: "b".into(),
                linear_output: false,
                output_shape: None,
            },
            StageEntry::Batchnorm {
                gamma: "g".into(),
                beta: "be".into(),
                mean: "m".into(),
                var: "v".into(),
                eps: bn.eps,
            },
            StageEntry::Gate { layer: 1 },
        ],
        heads: "y".into(),
        arrays: [
            ("w", vec![n, a.in_dim()]),
            ("b", vec![n]),
            ("g", vec![n]),
            ("be", vec![n]),
            ("m", vec![n]),
            ("v", vec![n]),
            ("y", vec![heads.nrows(), n]),
        ]
        .into_iter()
        .map(|(name, shape)| ArrayEntry {
            name: name.into(),
            shape,
        })
        .collect(),
    };
    let w: Vec<f64> = a.weight.iter().copied().collect();
    let y: Vec<f64> = heads.iter().copied().collect();
    let arrays: Vec<&[f64]> = vec![
        &w,
        a.bias.as_slice().unwrap(),
        bn.gamma.as_slice().unwrap(),
        bn.beta.as_slice().unwrap(),
        bn.mean.as_slice().unwrap(),
        bn.var.as_slice().unwrap(),
        &y,
    ];
    write_container(&manifest, &arrays).unwrap()
}

fn quantized(v: &Array1<f64>) -> Array1<f64> {
    v.mapv(|x| x as f32 as f64)
}

#[test]
fn container_folds_batchnorm_at_load() {
    let mut rng = common::rng(3);
    let a = Affine::new(
        Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
        uniform(&mut rng, 4),
    );
    let bn = random_bn(&mut rng, 4);
    let heads = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
    for (dtype, tol) in [(Dtype::F64, 1e-9), (Dtype::F32, 1e-6)] {
        let net = decode_model(&bn_container(&a, &bn, &heads, dtype)).unwrap();
        assert!(net.stages.iter().all(|s| s.kind() != "batchnorm"));
        // reference built from the values the container actually stores
        let q = |v: &Array1<f64>| {
            if dtype == Dtype::F32 {
                quantized(v)
            } else {
                v.clone()
            }
        };
        let qbn = BatchNorm {
            gamma: q(&bn.gamma),
            beta: q(&bn.beta),
            mean: q(&bn.mean),
            var: q(&bn.var),
            eps: bn.eps,
        };
        let qw = a.weight.mapv(|x| {
            if dtype == Dtype::F32 {
                x as f32 as f64
            } else {
                x
            }
        });
        let qy = heads.mapv(|x| {
            if dtype == Dtype::F32 {
                x as f32 as f64
            } else {
                x
            }
        });
        for _ in 0..100 {
            let x = uniform(&mut rng, 3);
            let z = bn_reference(&qbn, &(qw.dot(&x) + &q(&a.bias)), 1);
            let expected = qy.dot(&z.mapv(|v| if v > 0.0 { v } else { 0.0 }));
            assert!(max_rel(&net.forward(x.view()).unwrap().logits, &expected) <= tol);
        }
    }
}

#[test]
fn conformance_vector_decodes() {
    // Hand-assembled container for Affine W=[[2]], b=[-1], Gate, head y=[[3]].
    let manifest = br#"{"format_version":1,"dtype":"f64","input_shape":[1,1,1],"stages":[{"kind":"affine","weight":"w","bias":"b"},{"kind":"gate","layer":1}],"heads":"y","arrays":[{"name":"w","shape":[1,1]},{"name":"b","shape":[1]},{"name":"y","shape":[1,1]}]}"#;
    let mut bytes = b"GATEKIT1".to_vec();
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest);
    for v in [2.0f64, -1.0, 3.0] {
        bytes.extend_from_slice(&8u64.to_le_bytes());
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let net = decode_model(&bytes).unwrap();
    let expected = Network::dense(vec![(arr2(&[[2.0]]), arr1(&[-1.0]))], arr2(&[[3.0]])).unwrap();
    assert_eq!(net, expected);
    assert_eq!(net.forward(arr1(&[1.0]).view()).unwrap().logits[0], 3.0);
}

#[test]
fn file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(4);
    let conv = common::random_conv(&mut rng, Shape::new(3, 6, 6), 4, 5)
        .with_normalization(Normalization {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        })
        .unwrap();
    let dense = conv.densified().unwrap();
    for net in [conv, dense] {
        let p = dir.path().join("m.gkt");
        save_model(&net, &p, Dtype::F64).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, net);
        let first = std::fs::read(&p).unwrap();
        save_model(&back, &p, Dtype::F64).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        let c = read_container(&first).unwrap();
        let (_, arrays) = describe(&net, Dtype::F64);
        for (entry, data) in c.manifest.arrays.iter().zip(&arrays) {
            let stored = &c.arrays[&entry.name].1;
            assert!(stored
                .iter()
                .zip(data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn truncation_anywhere_in_the_payload_is_rejected() {
    let net = Network::random_dense(&[3, 4, 2], 2, 1.0, &mut common::rng(5)).unwrap();
    let bytes = encode_model(&net, Dtype::F32).unwrap();
    let manifest_end = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    for cut in manifest_end..bytes.len() {
        match decode_model(&bytes[..cut]) {
            Err(Error::PayloadLength { .. }) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

proptest! {
    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), scale_each in any::<bool>(), rgb in any::<bool>()) {
        let mut rng = common::rng(seed);
        let shape = if rgb { Shape::new(3, 5, 4) } else { Shape::new(1, 5, 4) };
        let cells: Vec<Array1<f64>> = (0..6).map(|_| uniform(&mut rng, shape.numel())).collect();
        let g = ImageGrid::new(2, 3, shape, cells, scale_each).unwrap();
        let a = g.render().unwrap();
        let b = g.clone().render().unwrap();
        prop_assert_eq!(&a.png, &b.png);
        prop_assert_eq!(&a.raw, &b.raw);
        prop_assert_eq!(read_raw_dump(&a.raw).unwrap().cells, g.cells);
    }

    #[test]
    fn scale_each_maps_cell_extremes_to_zero_and_one(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let shape = Shape::new(1, 3, 3);
        let cells: Vec<Array1<f64>> = (0..4).map(|_| uniform(&mut rng, 9) * 7.0).collect();
        let g = ImageGrid::new(2, 2, shape, cells.clone(), true).unwrap();
        let r = g.render().unwrap();
        for row in 0..2 {
            for col in 0..2 {
                let (oy, ox) = g.cell_origin(row, col);
                let px: Vec<f64> = (0..9).map(|i| r.intensities[(oy + i / 3) * r.width + ox + i % 3]).collect();
                let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
        }
    }
}

#[test]
fn pullback_grid_layout_five_by_six() {
    // 5 inputs as rows, 5 target classes plus one extra class as columns
    let shape = Shape::new(3, 4, 4);
    let cells: Vec<Array1<f64>> = (0..30)
        .map(|k| {
            let mut c = Array1::zeros(48);
            c[0] = k as f64;
            c
        })
        .collect();
    let g = ImageGrid::new(5, 6, shape, cells, false).unwrap();
    let r = g.render().unwrap();
    assert_eq!(r.width, 6 * (4 + PADDING) + PADDING);
    assert_eq!(r.height, 5 * (4 + PADDING) + PADDING);
    for row in 0..5 {
        for col in 0..6 {
            let (oy, ox) = g.cell_origin(row, col);
            assert_eq!((oy, ox), (PADDING + row * 6, PADDING + col * 6));
            // cell k = row * 6 + col carries k in its first pixel (clamped to [0, 1])
            let k = (row * 6 + col) as f64;
            assert_eq!(r.intensities[(oy * r.width + ox) * 3], k.min(1.0));
        }
    }
    assert_eq!(quantize(0.5), 128);
}
