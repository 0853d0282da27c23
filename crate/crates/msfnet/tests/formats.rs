use msfnet::metrics::{MetricsWriter, HEADER};
use msfnet::pfm::{self, PfmError};
use msfnet::{checkpoint, dataset, session};
use msfnet_core::synth::{DatasetFilterRule, RandomDotSpec};
use msfnet_core::train::{StepReport, TrainConfig, Trainer};
use msfnet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn pfm_round_trip_is_bit_exact_for_any_payload() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..1000 {
        let (h, w) = if i == 0 { (8, 12) } else { (rng.gen_range(1..20), rng.gen_range(1..20)) };
        // Arbitrary bit patterns cover NaN payloads, infinities and subnormals.
        let map = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| f32::from_bits(rng.gen()));
        let back = pfm::decode(&pfm::encode(&map).unwrap()).unwrap();
        assert_eq!(back.shape(), map.shape());
        assert_eq!(bits(&back), bits(&map));
    }
}

#[test]
fn pfm_reads_big_endian_and_crlf_headers() {
    let mut bytes = b"Pf\r\n2 1\r\n1.0\n".to_vec();
    bytes.extend_from_slice(&1.5f32.to_be_bytes());
    bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
    assert_eq!(pfm::decode(&bytes).unwrap().data(), &[1.5, -2.0]);
}

#[test]
fn pfm_rejections_name_the_problem() {
    assert!(matches!(pfm::decode(b"PF\n1 1\n-1\n\0\0\0\0\0\0\0\0\0\0\0\0"), Err(PfmError::UnsupportedChannels(_))));
    assert!(matches!(pfm::decode(b"Pf\n1 1\n0\n\0\0\0\0"), Err(PfmError::ZeroScale)));
    assert!(matches!(pfm::decode(b"Pf\n2 2\n-1\n\0\0\0\0"), Err(PfmError::Truncated { got: 4, expected: 16 })));
    assert!(matches!(pfm::decode(b"P6\n1 1\n-1\n"), Err(PfmError::Header(_))));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.pfm");
    let e = pfm::load_pfm(&missing).unwrap_err().to_string();
    assert!(e.contains("absent.pfm"), "{e}");
}

fn trained(steps: usize) -> Trainer {
    let config = TrainConfig { seed: 4, ..TrainConfig::default() };
    let data = session::synthetic_set(RandomDotSpec { height: 64, width: 128, max_disp: 24, shape_count: 3 }, 7, 4).unwrap();
    let mut t = Trainer::new(config).unwrap();
    for _ in 0..steps {
        t.step(&data).unwrap();
    }
    t
}

#[test]
fn checkpoints_restore_parameters_moments_and_position() {
    let t = trained(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.msfn");
    checkpoint::save(&t, &path).unwrap();
    assert!(!path.with_extension("tmp").exists());
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, t.config);
    assert_eq!(back.params, t.params);
    assert_eq!((back.adam.m.clone(), back.adam.v.clone(), back.adam.step), (t.adam.m.clone(), t.adam.v.clone(), t.adam.step));
    assert_eq!(back.iteration, 3);
    assert_eq!(checkpoint::encode(&back), checkpoint::encode(&t));

    let bytes = checkpoint::encode(&t);
    assert_eq!(&bytes[..4], b"MSFN");
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(checkpoint::decode(&bad).unwrap_err().contains("version"));
    let mut long = bytes;
    long.push(0);
    assert!(checkpoint::decode(&long).unwrap_err().contains("trailing"));
}

#[test]
fn metrics_rows_keep_exact_floats() {
    let report = StepReport {
        iteration: 12,
        loss: 0.1 + 0.2,
        components: Vec::new(),
        epe: 1.0 / 3.0,
        three_px: 25.0,
        lr: 2e-3,
    };
    let mut buf = Vec::new();
    {
        let mut w = MetricsWriter::new(&mut buf, true).unwrap();
        w.row(&report).unwrap();
        w.flush().unwrap();
    }
    let mut reader = csv::Reader::from_reader(&buf[..]);
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), HEADER);
    let row = reader.records().next().unwrap().unwrap();
    assert_eq!(row[0].parse::<u64>().unwrap(), 12);
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.1 + 0.2);
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0 / 3.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 2e-3);
}

#[test]
fn datasets_round_trip_and_apply_the_filter() {
    let spec = RandomDotSpec { height: 16, width: 40, max_disp: 9, shape_count: 2 };
    let mut samples = session::synthetic_set(spec, 3, 3).unwrap();
    // Push one sample past the rejection rule: 6 of its 16 rows exceed 300.
    let d = samples[2].disparity.tensor().clone();
    let big = Tensor::from_fn(d.shape(), |_, _, y, x| if y < 6 { 400.0 } else { d.at(0, 0, y, x) });
    samples[2].disparity = msfnet_core::DisparityMap::full(big).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &samples).unwrap();
    assert_eq!(dataset::list_stems(dir.path()).unwrap(), ["0000", "0001", "0002"]);

    let (all, rejected) = dataset::load_dataset(dir.path(), None).unwrap();
    assert_eq!((all.len(), rejected), (3, 0));
    for (a, b) in all.iter().zip(&samples) {
        assert_eq!(bits(a.disparity.tensor()), bits(b.disparity.tensor()));
        // 8-bit quantisation of the images.
        let worst = a.left.data().iter().zip(b.left.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
    let (kept, rejected) = dataset::load_dataset(dir.path(), Some(DatasetFilterRule::default())).unwrap();
    assert_eq!((kept.len(), rejected), (2, 1));
}
