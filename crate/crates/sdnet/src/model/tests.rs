use rand::Rng;

use super::*;
use crate::params::ParamKind;
use crate::swin::basic_block_forward;
use crate::tensor::Tape;
use crate::testutil;

fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = testutil::rng(seed);
    let data = testutil::rand_vec(&mut rng, h * w * 3, 0.0, 1.0);
    Tensor::from_vec(data, &[h, w, 3]).unwrap()
}

/// Scalar count of one basic block, written out long-hand.
fn block_scalars(b: &BlockConfig) -> usize {
    let t = b.token_dim();
    let c = b.embed_dim;
    let hid = b.mlp_ratio * c;
    let span = 2 * b.window_size - 1;
    let embed = t * c + c;
    let unembed = c * t + t;
    let per_sub = 2 * (c + c) // two layer norms
        + 4 * (c * c + c) // q, k, v, o projections
        + span * span * b.num_heads // bias table
        + (c * hid + hid) + (hid * c + c); // mlp
    embed + 2 * per_sub + unembed
}

#[test]
fn default_param_count() {
    let cfg = ModelConfig::default();
    let per_block = block_scalars(&cfg.block);
    assert_eq!(per_block, 75_399);
    // stem + 3 * (3 branches + fuse) + 3 branch-only + tail = 17 blocks
    assert_eq!(param_count(&cfg), 17 * per_block);
    assert_eq!(param_count(&cfg), 1_281_783);

    let reference = 1_730_000.0;
    let ratio = param_count(&cfg) as f64 / reference;
    assert!((0.7..=1.3).contains(&ratio), "ratio {ratio}");

    let store = init_params::<f32>(&cfg, 0).unwrap();
    assert_eq!(store.total_scalars(), param_count(&cfg));
}

#[test]
fn branch_increment_is_four_blocks() {
    let base = ModelConfig::default();
    let mut wide = base;
    wide.num_branches = 4;
    let per_block = block_scalars(&base.block);
    // one extra branch adds a block to each of the 3 MSwt modules and to Mswt-m
    assert_eq!(param_count(&wide) - param_count(&base), 4 * per_block);

    let mut deep = base;
    deep.num_mswt = 4;
    // one extra MSwt adds its branches plus a fusion block
    assert_eq!(param_count(&deep) - param_count(&base), 4 * per_block);
}

#[test]
fn param_groups_follow_wiring() {
    let cfg = ModelConfig::default();
    let groups = param_count_by_module(&cfg);
    let names: Vec<&str> = groups.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, vec!["stem", "mswt.0", "mswt.1", "mswt.2", "mswtm", "tail"]);
    let per_block = block_scalars(&cfg.block);
    assert_eq!(groups[0].1, per_block);
    assert_eq!(groups[1].1, 4 * per_block);
    assert_eq!(groups[4].1, 3 * per_block);
    assert_eq!(groups.iter().map(|(_, n)| n).sum::<usize>(), param_count(&cfg));
}

#[test]
fn init_is_deterministic_with_documented_distribution() {
    let cfg = ModelConfig::tiny();
    let a = init_params::<f64>(&cfg, 7).unwrap();
    let b = init_params::<f64>(&cfg, 7).unwrap();
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data, tb.data);
    }
    let c = init_params::<f64>(&cfg, 8).unwrap();
    assert!(a.iter().zip(c.iter()).any(|((_, ta), (_, tc))| ta.data != tc.data));

    let kinds: std::collections::HashMap<String, ParamKind> =
        param_specs(&cfg).into_iter().map(|s| (s.name, s.kind)).collect();
    let mut weights: Vec<f64> = Vec::new();
    for (name, t) in a.iter() {
        match kinds[name] {
            ParamKind::Weight => {
                assert!(t.data.iter().all(|v| v.abs() <= 0.04), "{name}");
                weights.extend(&t.data);
            }
            ParamKind::Bias => assert!(t.data.iter().all(|&v| v == 0.0), "{name}"),
            ParamKind::Gain => assert!(t.data.iter().all(|&v| v == 1.0), "{name}"),
        }
    }
    assert!(weights.len() > 10_000);
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    let var = weights.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / weights.len() as f64;
    assert!(mean.abs() < 2e-3, "mean {mean}");
    // truncation at 2 sigma shrinks the std of N(0, 0.02) to about 0.0176
    assert!((var.sqrt() - 0.0176).abs() < 1.5e-3, "std {}", var.sqrt());
}

#[test]
fn rejects_degenerate_shapes() {
    let mut cfg = ModelConfig::tiny();
    cfg.num_branches = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.num_branches = 2;
    cfg.num_mswt = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    assert!(Variant::parse("R2").is_ok());
    assert!(Variant::parse("r4").is_err());
}

#[test]
fn params_are_checked_against_config() {
    let cfg = ModelConfig::tiny();
    let store = init_params::<f32>(&cfg, 0).unwrap();
    check_params_match(&store, &cfg).unwrap();

    let mut wide = cfg;
    wide.num_branches = 3;
    assert!(check_params_match(&store, &wide).is_err());

    let mut fat = cfg;
    fat.block.embed_dim = 36;
    assert!(check_params_match(&store, &fat).is_err());
}

#[test]
fn identical_branches_collapse_to_scaled_single_branch() {
    let cfg = ModelConfig::tiny();
    let mut store = init_params::<f64>(&cfg, 11).unwrap();
    // tie branch 1 of mswtm to branch 0
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("mswtm.branch.0."))
        .map(str::to_string)
        .collect();
    for name in names {
        let src = store.get(&name).unwrap().data.clone();
        let dst = name.replace("branch.0", "branch.1");
        store.get_mut(&dst).unwrap().data = src;
    }
    let bound = store.bind_const();
    let x = rand_image(3, 9, 9);
    let summed = mswt_m_forward(&x, &bound, "mswtm", &cfg).unwrap();
    let single = basic_block_forward(&x, &bound, "mswtm.branch.0", &cfg.block).unwrap();
    for (s, y) in summed.data().iter().zip(single.data().iter()) {
        assert!((s - 2.0 * y).abs() < 1e-12, "{s} vs {}", 2.0 * y);
    }
}

#[test]
fn forward_matches_manual_wiring() {
    let cfg = ModelConfig::tiny();
    let store = init_params::<f64>(&cfg, 5).unwrap();
    let bound = store.bind_const();
    let x = rand_image(9, 9, 9);

    let stem = basic_block_forward(&x, &bound, "stem", &cfg.block).unwrap();
    let f1 = mswt_forward(&stem, &bound, "mswt.0", &cfg).unwrap();
    let f2 = mswt_forward(&f1, &bound, "mswt.1", &cfg).unwrap();
    let g = mswt_m_forward(&f2, &bound, "mswtm", &cfg).unwrap().add(&f2).unwrap();
    let expected = basic_block_forward(&g, &bound, "tail", &cfg.block).unwrap().add(&stem).unwrap();

    let got = sdnet_forward(&x, &bound, &cfg).unwrap();
    assert_eq!(got.data(), expected.data());
}

#[test]
fn skip_variants_differ_and_decompose() {
    let base = ModelConfig::tiny();
    let store = init_params::<f64>(&base, 13).unwrap();
    let bound = store.bind_const();
    let x = rand_image(17, 9, 9);

    let outs: Vec<Tensor<f64>> = [Variant::R1, Variant::R2, Variant::R3, Variant::Sdnet]
        .iter()
        .map(|&v| sdnet_forward(&x, &bound, &base.with_variant(v)).unwrap())
        .collect();
    for i in 0..outs.len() {
        assert_eq!(outs[i].shape(), x.shape());
        for j in i + 1..outs.len() {
            assert_ne!(outs[i].data(), outs[j].data(), "variants {i} and {j} agree");
        }
    }

    // R3 and R1 share the entire trunk; R3 only adds the stem features back
    let stem = basic_block_forward(&x, &bound, "stem", &base.block).unwrap();
    for ((r3, r1), s) in outs[2].data().iter().zip(outs[0].data().iter()).zip(stem.data().iter()) {
        assert!((r3 - r1 - s).abs() < 1e-12);
    }

    // with the input as large-skip source, that difference is the input itself
    let mut from_input = base.with_variant(Variant::R3);
    from_input.large_skip_source = LargeSkipSource::Input;
    let out = sdnet_forward(&x, &bound, &from_input).unwrap();
    for ((o, r1), v) in out.data().iter().zip(outs[0].data().iter()).zip(x.data().iter()) {
        assert!((o - r1 - v).abs() < 1e-12);
    }
}

#[test]
fn default_config_preserves_shape_at_63() {
    let cfg = ModelConfig::default();
    let store = init_params::<f32>(&cfg, 1).unwrap();
    let bound = store.bind_const();
    let x = rand_image(21, 63, 63);
    let x32 = Tensor::from_vec(x.data().iter().map(|&v| v as f32).collect(), x.shape()).unwrap();
    let y = sdnet_forward(&x32, &bound, &cfg).unwrap();
    assert_eq!(y.shape(), [63, 63, 3]);
    assert!(y.data().iter().all(|v| v.is_finite()));

    // indivisible input sizes are rejected, not silently padded
    let bad = Tensor::<f32>::zeros(&[64, 63, 3]).unwrap();
    assert!(sdnet_forward(&bad, &bound, &cfg).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = ModelConfig::tiny();
    let store = init_params::<f32>(&cfg, 2).unwrap();
    let bound = store.bind_const();
    let x = rand_image(4, 9, 9);
    let x32 = Tensor::from_vec(x.data().iter().map(|&v| v as f32).collect::<Vec<f32>>(), x.shape()).unwrap();
    let a = sdnet_forward(&x32, &bound, &cfg).unwrap();
    let b = sdnet_forward(&x32, &bound, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn gradients_reach_every_parameter() {
    let cfg = ModelConfig::tiny();
    let store = init_params::<f64>(&cfg, 21).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let x = rand_image(22, 9, 9);
    let y = sdnet_forward(&x, &bound, &cfg).unwrap();
    // squared output makes the loss curvature bite every linear path
    y.mul(&y).unwrap().mean_all().unwrap().backward().unwrap();
    for name in store.names() {
        let g = bound.grad(name).unwrap().unwrap_or_else(|| panic!("no grad for {name}"));
        assert!(g.iter().any(|&v| v != 0.0), "all-zero grad for {name}");
    }
}

#[test]
fn full_model_gradients_match_finite_differences_on_sampled_coords() {
    let cfg = ModelConfig::tiny();
    let store = init_params::<f64>(&cfg, 31).unwrap();
    let x = rand_image(32, 9, 9);

    let loss_of = |s: &ParamStore<f64>| -> f64 {
        let out = sdnet_forward(&x, &s.bind_const(), &cfg).unwrap();
        out.mul(&out).unwrap().mean_all().unwrap().item().unwrap()
    };

    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let xv = tape.var(x.data().to_vec(), x.shape()).unwrap();
    let out = sdnet_forward(&xv, &bound, &cfg).unwrap();
    out.mul(&out).unwrap().mean_all().unwrap().backward().unwrap();

    let h = 1e-4;
    let tol = 1e-3;
    let mut rng = testutil::rng(99);
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let grad = bound.grad(name).unwrap().unwrap();
        let n = grad.len();
        for _ in 0..2 {
            let j = rng.gen_range(0..n);
            let orig = probe.get(name).unwrap().data[j];
            probe.get_mut(name).unwrap().data[j] = orig + h;
            let up = loss_of(&probe);
            probe.get_mut(name).unwrap().data[j] = orig - h;
            let down = loss_of(&probe);
            probe.get_mut(name).unwrap().data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = grad[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= tol, "{name}[{j}]: ad={ad} fd={fd} rel={rel}");
        }
    }

    // input gradient, a handful of coordinates
    let xgrad = xv.grad().unwrap();
    let mut xb = x.data().to_vec();
    for _ in 0..12 {
        let j = rng.gen_range(0..xb.len());
        let orig = xb[j];
        let eval = |buf: &[f64]| {
            let t = Tensor::from_vec(buf.to_vec(), x.shape()).unwrap();
            let o = sdnet_forward(&t, &store.bind_const(), &cfg).unwrap();
            o.mul(&o).unwrap().mean_all().unwrap().item().unwrap()
        };
        xb[j] = orig + h;
        let up = eval(&xb);
        xb[j] = orig - h;
        let down = eval(&xb);
        xb[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let ad = xgrad[j];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
        assert!(rel <= tol, "input[{j}]: ad={ad} fd={fd} rel={rel}");
    }
}
