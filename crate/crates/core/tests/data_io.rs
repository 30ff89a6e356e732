use std::fs;
use std::path::Path;

use qcfs_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata};
use qcfs_core::converter::convert;
use qcfs_core::data::{load_idx, synth_blobs, Split, MNIST_MEAN, MNIST_STD};
use qcfs_core::trainer::{build_model, TrainConfig};
use qcfs_core::{Architecture, Dataset, Error};

fn write_idx_fixture(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = 0x0803u32.to_be_bytes().to_vec();
    for d in [n as u32, 28, 28] {
        img.extend(d.to_be_bytes());
    }
    for i in 0..n * 784 {
        img.push((i % 256) as u8);
    }
    let mut lab = 0x0801u32.to_be_bytes().to_vec();
    lab.extend((n as u32).to_be_bytes());
    lab.extend((0..n).map(|i| (i * 3 % 10) as u8));
    let (ip, lp) = (dir.join("images"), dir.join("labels"));
    fs::write(&ip, img).unwrap();
    fs::write(&lp, lab).unwrap();
    (ip, lp)
}

#[test]
fn idx_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx_fixture(dir.path(), 4);
    let ds = load_idx(&ip, &lp, Split::Test).unwrap();
    assert_eq!(ds.inputs.shape(), &[4, 1, 28, 28]);
    assert_eq!(ds.labels, vec![0, 3, 6, 9]);
    assert_eq!(ds.split, Split::Test);
    // Byte 300 of the pixel block is 300 % 256 = 44.
    let want = (44.0 / 255.0 - MNIST_MEAN) / MNIST_STD;
    assert_eq!(ds.inputs.data()[300], want);
}

#[test]
fn idx_errors_carry_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx_fixture(dir.path(), 2);
    // Swap the files: the label loader now sees image magic.
    assert!(matches!(
        load_idx(&lp, &ip, Split::Train),
        Err(Error::Format { offset: 0, .. })
    ));
    let empty = dir.path().join("empty");
    fs::write(&empty, []).unwrap();
    assert!(matches!(load_idx(&empty, &lp, Split::Train), Err(Error::Format { .. })));
    let bytes = fs::read(&ip).unwrap();
    let cut = dir.path().join("cut");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    match load_idx(&cut, &lp, Split::Train) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset as usize, bytes.len() - 10);
            assert!(message.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &lp, Split::Train),
        Err(Error::Data(_))
    ));
}

fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let dim = ds.inputs.sample_len();
    let mut centroids = vec![vec![0.0; dim]; ds.num_classes];
    let mut counts = vec![0.0; ds.num_classes];
    for (row, &y) in ds.inputs.data().chunks(dim).zip(&ds.labels) {
        for (c, v) in centroids[y].iter_mut().zip(row) {
            *c += v;
        }
        counts[y] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let hits = ds
        .inputs
        .data()
        .chunks(dim)
        .zip(&ds.labels)
        .filter(|(row, &y)| {
            let dist = |c: &Vec<f64>| c.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..ds.num_classes).all(|k| k == y || dist(&centroids[y]) < dist(&centroids[k]))
        })
        .count();
    hits as f64 / ds.len() as f64
}

#[test]
fn blob_oracles() {
    let tight = synth_blobs(50, 4, 3, 0.0, 3).unwrap();
    assert_eq!(nearest_centroid_accuracy(&tight), 1.0);
    let seven = synth_blobs(500, 2, 2, 0.5, 7).unwrap();
    let acc = nearest_centroid_accuracy(&seven);
    assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
    for j in 0..2 {
        let col: Vec<f64> = seven.inputs.data().iter().skip(j).step_by(2).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        seed: 77,
        ..TrainConfig::default()
    };
    let ann = build_model(Architecture::ConvSmall, &[1, 12, 12], 4, &cfg).unwrap();
    let meta = Metadata {
        seed: Some(cfg.seed),
        config_digest: Some(cfg.digest()),
        ..Metadata::default()
    };
    let path = dir.path().join("ann.ckpt");
    save_checkpoint(&Checkpoint::ann(ann.clone(), meta.clone()), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.metadata, meta);
    let back = back.into_ann().unwrap();
    assert_eq!(back.weight_checksum(), ann.weight_checksum());
    assert_eq!(back, ann);

    let snn = convert(&ann, None).unwrap();
    let spath = dir.path().join("snn.ckpt");
    save_checkpoint(&Checkpoint::snn(snn.clone(), Metadata::default()), &spath).unwrap();
    let sback = load_checkpoint(&spath).unwrap().into_snn().unwrap();
    assert_eq!(sback, snn);
    for (a, b) in sback.spiking_params().iter().zip(snn.spiking_params()) {
        assert_eq!(a.theta.to_bits(), b.theta.to_bits());
        assert_eq!(a.v0.to_bits(), b.v0.to_bits());
    }
    let err = load_checkpoint(&spath).unwrap().into_ann().unwrap_err();
    assert!(err.to_string().contains("snn"), "{err}");
}
