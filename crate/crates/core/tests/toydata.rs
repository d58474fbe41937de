use probekit::rng;
use probekit::tensor::io::{decode_ptar, decode_ptns, encode_ptar, encode_ptns};
use probekit::tensor::Tensor;
use probekit::toydata::{SourceTag, SplitDataset, ToyDomain};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Plain-f64 two-layer softmax classifier trained by full-batch-free SGD
/// with hand-written gradients.
struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d: usize,
    h: usize,
    k: usize,
}

impl Mlp {
    fn new(d: usize, h: usize, k: usize, r: &mut rng::Rng) -> Self {
        let mut init = |n: usize, fan: usize| {
            (0..n)
                .map(|_| (r.random::<f64>() - 0.5) * 2.0 / (fan as f64).sqrt())
                .collect()
        };
        Self {
            w1: init(h * d, d),
            b1: vec![0.0; h],
            w2: init(k * h, h),
            b2: vec![0.0; k],
            d,
            h,
            k,
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid: Vec<f64> = (0..self.h)
            .map(|j| {
                (self.b1[j]
                    + (0..self.d)
                        .map(|i| self.w1[j * self.d + i] * x[i])
                        .sum::<f64>())
                .max(0.0)
            })
            .collect();
        let z: Vec<f64> = (0..self.k)
            .map(|c| {
                self.b2[c]
                    + (0..self.h)
                        .map(|j| self.w2[c * self.h + j] * hid[j])
                        .sum::<f64>()
            })
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        (hid, e.into_iter().map(|v| v / s).collect())
    }

    fn sgd(&mut self, x: &[f64], y: usize, lr: f64) {
        let (hid, p) = self.forward(x);
        let dz: Vec<f64> = (0..self.k).map(|c| p[c] - (c == y) as u8 as f64).collect();
        let mut dh = vec![0.0; self.h];
        for c in 0..self.k {
            for j in 0..self.h {
                dh[j] += dz[c] * self.w2[c * self.h + j];
                self.w2[c * self.h + j] -= lr * dz[c] * hid[j];
            }
            self.b2[c] -= lr * dz[c];
        }
        for j in 0..self.h {
            if hid[j] <= 0.0 {
                continue;
            }
            for i in 0..self.d {
                self.w1[j * self.d + i] -= lr * dh[j] * x[i];
            }
            self.b1[j] -= lr * dh[j];
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let (_, p) = self.forward(x);
        (0..self.k).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
    }
}

#[test]
fn classes_are_distinguishable_by_a_small_classifier() {
    let domain = ToyDomain::default();
    let train = domain.make_split::<f64>(250, 1, "train").unwrap();
    let test = domain.make_split::<f64>(250, 1, "test").unwrap();
    let mut r = rng::rng(0);
    let mut mlp = Mlp::new(domain.pixels(), 32, domain.classes, &mut r);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..15 {
        order.shuffle(&mut r);
        for &i in &order {
            mlp.sgd(train.items[i].pixels.data(), train.items[i].class_id, 0.01);
        }
    }
    let correct = test
        .items
        .iter()
        .filter(|i| mlp.predict(i.pixels.data()) == i.class_id)
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert_eq!(test.len(), 1000);
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn splits_are_disjoint_deterministic_and_hierarchically_seeded() {
    let d = ToyDomain::default();
    let a = d.make_split::<f32>(20, 5, "train").unwrap();
    let b = d.make_split::<f32>(20, 5, "test").unwrap();
    let c = d.make_split::<f32>(20, 6, "train").unwrap();
    assert_eq!(a.len(), 80);
    for x in &a.items {
        assert!(b.items.iter().all(|y| y.pixels != x.pixels));
    }
    for (x, y) in a.items.iter().zip(&c.items) {
        assert_ne!(x.pixels, y.pixels);
    }
    assert_eq!(a, d.make_split::<f32>(20, 5, "train").unwrap());
    assert_eq!(d.make_split::<f32>(2, 1, "x").unwrap().len(), 8);
    assert!(d.make_split::<f32>(0, 1, "x").is_err());
    assert!(a
        .items
        .iter()
        .enumerate()
        .all(|(i, it)| it.class_id == i % 4 && it.source == SourceTag::Real && it.label() == 0));
}

#[test]
fn sample_rejects_out_of_range_classes_and_bad_domains() {
    let d = ToyDomain::default();
    assert!(d.sample_real::<f64>(4, &mut rng::rng(0)).is_err());
    assert!(ToyDomain::new(4, 2).is_err());
    assert!(ToyDomain::new(16, 5).is_err());
    assert_eq!(ToyDomain::new(32, 2).unwrap().null_class(), 2);
}

#[test]
fn dataset_files_roundtrip_and_are_byte_stable() {
    let d = ToyDomain::default();
    let mut data = d.make_split::<f32>(3, 2, "fresh").unwrap();
    data.items[0].source = SourceTag::Probe;
    data.items[0].meta.seed = Some(99);
    data.items[0].meta.score = Some(0.25);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ptar"), dir.path().join("b.ptar"));
    data.save(&p1).unwrap();
    data.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(
        std::fs::read(p1.with_extension("json")).unwrap(),
        std::fs::read(p2.with_extension("json")).unwrap()
    );
    let back = SplitDataset::<f32>::load(&p1).unwrap();
    assert_eq!(back, data);
}

#[test]
fn ptns_layout_is_byte_exact() {
    let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
    let mut buf = Vec::new();
    encode_ptns(&t, &mut buf).unwrap();
    let mut want = vec![0x50, 0x54, 0x4E, 0x53, 1, 0, 0, 2];
    want.extend(2u64.to_le_bytes());
    want.extend(1u64.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.5f32).to_le_bytes());
    assert_eq!(buf, want);
    assert_eq!(decode_ptns::<f32>(&buf).unwrap(), t);

    let u = Tensor::<f64>::scalar(3.0);
    let ar = encode_ptar(&[("ab".to_string(), &u)]).unwrap();
    assert_eq!(&ar[..4], b"PTAR");
    assert_eq!(&ar[4..8], &1u32.to_le_bytes());
    assert_eq!(&ar[8..10], &2u16.to_le_bytes());
    assert_eq!(&ar[10..12], b"ab");
    assert_eq!(ar[12 + 6], 1, "f64 dtype tag");
    assert_eq!(
        decode_ptar::<f64>(&ar).unwrap(),
        vec![("ab".to_string(), u)]
    );
    assert!(decode_ptns::<f32>(&buf[..9]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(decode_ptns::<f32>(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn items_are_bounded_and_prefix_stable(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let d = ToyDomain { size: 8, ..ToyDomain::default() };
        let a = d.make_split::<f64>(n, seed, "s").unwrap();
        let b = d.make_split::<f64>(m, seed, "s").unwrap();
        let k = a.len().min(b.len());
        prop_assert_eq!(&a.items[..k], &b.items[..k]);
        prop_assert!(a.items.iter().all(|i| i.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        prop_assert!(a.items.iter().all(|i| i.pixels.dims() == [8, 8]));
    }
}
