use gmfcvae::gmvae::{GmvaeModel, Mixture, Network, LATENT_DIM};
use gmfcvae::patches::Stream;
use gmfcvae::scoring::{sample_energy, score_frame, score_frames};
use gmfcvae::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> GmvaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = Network::glorot(&mut rng);
    let means = Tensor::new(vec![3, LATENT_DIM], (0..3 * LATENT_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let mixture = Mixture::new(Tensor::from_vec(vec![0.1, -0.2, 0.0]), means, Tensor::full(&[3, LATENT_DIM], -1.0)).unwrap();
    GmvaeModel::new(net, mixture).unwrap()
}

fn frame(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn tile(f: &Tensor, r: usize, c: usize) -> Tensor {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let mut out = Vec::with_capacity(3 * 784);
    for ch in 0..3 {
        for y in 0..28 {
            let at = ch * h * w + (r * 28 + y) * w + c * 28;
            out.extend_from_slice(&f.data()[at..at + 28]);
        }
    }
    Tensor::new(vec![1, 3, 28, 28], out).unwrap()
}

fn paste(f: &mut Tensor, r: usize, c: usize, t: &Tensor) {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    for ch in 0..3 {
        for y in 0..28 {
            let at = ch * h * w + (r * 28 + y) * w + c * 28;
            let src = ch * 784 + y * 28;
            f.data_mut()[at..at + 28].copy_from_slice(&t.data()[src..src + 28]);
        }
    }
}

#[test]
fn each_cell_is_its_patch_energy() {
    let m = model();
    let f = frame(84, 140, 1);
    let map = score_frame(&m, &f, Stream::Appearance, 0).unwrap();
    assert_eq!((map.rows, map.cols), (3, 5));
    for r in 0..3 {
        for c in 0..5 {
            let (mu, _) = m.encode(&tile(&f, r, c)).unwrap();
            let e = sample_energy(mu.data(), &m.mixture).unwrap();
            assert!((map.get(r, c) - e).abs() < 1e-10 * e.abs().max(1.0));
        }
    }
}

#[test]
fn substituting_a_patch_changes_only_its_cell() {
    let m = model();
    let f = frame(84, 140, 2);
    let before = score_frame(&m, &f, Stream::Motion, 0).unwrap();
    let donor = frame(28, 28, 3).reshape(&[1, 3, 28, 28]).unwrap();
    let mut g = f.clone();
    paste(&mut g, 1, 3, &donor);
    let after = score_frame(&m, &g, Stream::Motion, 0).unwrap();
    let (mu, _) = m.encode(&donor).unwrap();
    let want = sample_energy(mu.data(), &m.mixture).unwrap();
    for r in 0..3 {
        for c in 0..5 {
            if (r, c) == (1, 3) {
                assert!((after.get(r, c) - want).abs() < 1e-10 * want.abs().max(1.0));
                assert_ne!(after.get(r, c), before.get(r, c));
            } else {
                assert_eq!(after.get(r, c), before.get(r, c));
            }
        }
    }
}

#[test]
fn duplicate_frames_score_identically() {
    let m = model();
    let f = frame(56, 84, 4);
    let other = frame(56, 84, 5);
    let maps = score_frames(&m, &[f.clone(), other, f], Stream::Appearance).unwrap();
    assert_eq!(maps[0].values, maps[2].values);
    assert_ne!(maps[0].values, maps[1].values);
    assert_eq!(maps.iter().map(|m| m.frame).collect::<Vec<_>>(), vec![0, 1, 2]);
}
