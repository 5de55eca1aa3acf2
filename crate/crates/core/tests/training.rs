use gmfcvae::gmvae::loss::{elbo_loss, reparameterize, BoundModel};
use gmfcvae::gmvae::mixture::log_variance_floor;
use gmfcvae::gmvae::train::fit_joint_with;
use gmfcvae::gmvae::{pretrain, GmvaeModel, Mixture, Network, TrainConfig, TrainReport, LATENT_DIM, PIXELS};
use gmfcvae::tensor::{Graph, Tensor, Var};
use gmfcvae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn patch() -> Vec<f64> {
    (0..PIXELS)
        .map(|i| {
            let (c, y, x) = (i / 784, (i / 28) % 28, i % 28);
            0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())
        })
        .collect()
}

fn repeated(n: usize) -> Tensor {
    let p = patch();
    Tensor::new(vec![n, 3, 28, 28], (0..n).flat_map(|_| p.iter().copied()).collect()).unwrap()
}

#[test]
fn pretraining_memorises_a_repeated_patch() {
    let x = repeated(16);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        weight_decay: 0.0,
        batch_size: 4,
        pretrain_epochs: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut net = Network::glorot(&mut ChaCha8Rng::seed_from_u64(3));
    let mse = pretrain(&mut net, &x, &cfg).unwrap();
    assert!(mse[..5].windows(2).all(|w| w[1] <= w[0]), "{:?}", &mse[..5]);
    let last = *mse.last().unwrap();
    assert!(last < 1e-3, "final per-pixel error {last}");
}

fn vae_loss(g: &mut Graph, b: &BoundModel, x: Var, eps: &[Tensor]) -> Result<(Var, Var, Var)> {
    let n = g.shape(x)[0];
    let (mu, raw) = b.net.encode(g, x)?;
    let lv = g.clamp_min(raw, log_variance_floor());
    let ev = g.constant(eps[0].clone());
    let z = reparameterize(g, mu, lv, ev)?;
    let recon = b.net.decode(g, z)?;
    let diff = g.sub(x, recon)?;
    let sq = g.square(diff);
    let flat = g.reshape(sq, &[n, PIXELS])?;
    let rec = g.sum_axis(flat, 1)?;

    // KL(N(μ̃, σ̃²) ‖ N(μ₁, σ₁²)) in closed form
    let lv_p = g.clamp_min(b.log_vars, log_variance_floor());
    let lv_p = g.reshape(lv_p, &[LATENT_DIM])?;
    let m_p = g.reshape(b.means, &[LATENT_DIM])?;
    let var_p = g.exp(lv_p);
    let var_q = g.exp(lv);
    let ratio = g.div(var_q, var_p)?;
    let d = g.sub(mu, m_p)?;
    let d2 = g.square(d);
    let maha = g.div(d2, var_p)?;
    let logs = g.sub(lv_p, lv)?;
    let t = g.add(ratio, maha)?;
    let t = g.add(t, logs)?;
    let t = g.add_scalar(t, -1.0);
    let kl = g.sum_axis(t, 1)?;
    let kl = g.scale(kl, 0.5);

    let per = g.add(rec, kl)?;
    Ok((g.mean(per), g.mean(rec), g.mean(kl)))
}

#[test]
fn single_component_matches_plain_vae() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..12 * PIXELS).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = Tensor::new(vec![12, 3, 28, 28], data).unwrap();
    let mut net = Network::glorot(&mut rng);
    net.layers[5].1 = Tensor::full(&[LATENT_DIM], -2.0);
    let means = Tensor::new(vec![1, LATENT_DIM], (0..LATENT_DIM).map(|_| rng.gen_range(-0.2..0.2)).collect()).unwrap();
    let mixture = Mixture::new(Tensor::zeros(&[1]), means, Tensor::full(&[1, LATENT_DIM], -0.3)).unwrap();
    let start = GmvaeModel::new(net, mixture).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 3,
        components: 1,
        seed: 11,
        ..TrainConfig::default()
    };

    let mut gm = start.clone();
    let mut gm_report = TrainReport::default();
    let elbo = |g: &mut Graph, b: &BoundModel, x: Var, eps: &[Tensor]| {
        let l = elbo_loss(g, b, x, eps)?;
        Ok((l.total, l.reconstruction, l.kl))
    };
    fit_joint_with(&mut gm, &x, &cfg, &elbo, &mut gm_report).unwrap();

    let mut vae = start;
    let mut vae_report = TrainReport::default();
    fit_joint_with(&mut vae, &x, &cfg, &vae_loss, &mut vae_report).unwrap();

    for (a, b) in gm_report.loss.iter().zip(&vae_report.loss) {
        assert!((a - b).abs() < 1e-8 * b.abs(), "{a} vs {b}");
    }
    for (a, b) in gm_report.kl.iter().zip(&vae_report.kl) {
        assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }
    for ((wa, ba), (wb, bb)) in gm.net.layers.iter().zip(&vae.net.layers) {
        for (p, q) in wa.data().iter().chain(ba.data()).zip(wb.data().iter().chain(bb.data())) {
            assert!((p - q).abs() < 1e-8, "{p} vs {q}");
        }
    }
    for (p, q) in gm.mixture.means.data().iter().zip(vae.mixture.means.data()) {
        assert!((p - q).abs() < 1e-8);
    }
}
