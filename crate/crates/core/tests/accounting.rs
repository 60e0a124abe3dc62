use cmafnet::csif::{Csif, Mhsa};
use cmafnet::nn::{Conv, ConvBnAct, Module};
use cmafnet::srm::{analytic_params, Srm};
use cmafnet::topology::{LayerKind, Layer, ModelConfig, ModelGraph, ScaleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook convolution cost: 2 · Cout · (Cin / groups) · k² · Hout · Wout.
fn conv_flops(cin: usize, cout: usize, k: usize, groups: usize, hout: usize, wout: usize) -> u64 {
    (2 * cout * (cin / groups) * k * k * hout * wout) as u64
}

#[test]
fn srm_param_formula_for_random_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10 {
        let c = rng.gen_range(1..300);
        let k = rng.gen_range(1..300);
        let srm = Srm::with_config(c, k, 0.8, 1e-5, &mut rng).unwrap();
        let formula = (c * k + k) + (25 * k + k) + (k * c + c);
        assert_eq!(srm.num_params(), formula, "C={c} K={k}");
        assert_eq!(analytic_params(c, k), formula);
    }
}

#[test]
fn plain_and_grouped_conv_flops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (cin, cout, k, groups) in [(3, 16, 3, 1), (16, 16, 5, 16), (8, 24, 1, 1), (12, 12, 7, 12)] {
        let conv = Conv::new(cin, cout, k, groups, true, &mut rng);
        // stride 1 same padding keeps 9x11
        assert_eq!(2 * conv.macs(9 * 11), conv_flops(cin, cout, k, groups, 9, 11));
    }
    let down = ConvBnAct::new(16, 32, 3, 2, &mut rng);
    assert_eq!(down.output_hw(40, 40).unwrap(), (20, 20));
    assert_eq!(2 * down.macs(40, 40), conv_flops(16, 32, 3, 1, 20, 20));
}

#[test]
fn every_conv_node_matches_the_textbook_formula() {
    let g = ModelGraph::build(&ModelConfig::for_scale(ScaleConfig::preset("n").unwrap()), 0).unwrap();
    let stats = g.node_stats(640, 640).unwrap();
    let mut checked = 0;
    for (node, s) in g.nodes.iter().zip(&stats) {
        if let Layer::Conv(c) = &node.layer {
            assert_eq!(s.flops, conv_flops(c.in_channels(), c.out_channels(), c.kernel(), 1, s.height, s.width));
            checked += 1;
        }
    }
    assert_eq!(checked, g.count_kind(LayerKind::Conv));
    assert!(checked >= 10);
}

#[test]
fn srm_and_attention_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let srm = Srm::with_config(64, 32, 0.8, 1e-5, &mut rng).unwrap();
    let hw = 10 * 10;
    assert_eq!(srm.macs(10, 10), ((64 * 32 + 25 * 32 + 32 * 64) * hw) as u64);
    let m = Mhsa::new(128, &mut rng).unwrap();
    let (c, t) = (128u64, 20u64);
    assert_eq!(m.macs(4, 5), 4 * c * c * t + 2 * t * t * c);
}

#[test]
fn node_params_add_up_to_model_params() {
    let g = ModelGraph::build(&ModelConfig::for_scale(ScaleConfig::micro()), 0).unwrap();
    let per_node: usize = g.node_stats(64, 64).unwrap().iter().map(|s| s.params).sum();
    assert_eq!(per_node, g.count_params());
    let c5 = g.plan.channels[4];
    let csif = Csif::new(c5, c5, g.plan.csif_blocks, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let csif_node = g.find("fuse.p5.csif").unwrap();
    assert_eq!(g.node_stats(64, 64).unwrap()[csif_node].params, csif.num_params());
}

#[test]
fn nano_totals_are_reported() {
    let g = ModelGraph::build(&ModelConfig::for_scale(ScaleConfig::preset("n").unwrap()), 0).unwrap();
    let params = g.count_params() as f64 / 1e6;
    let gflops = g.count_flops(640).unwrap() as f64 / 1e9;
    // informational only: reference nano figures are 4.9M params / 12.4 GFLOPs
    println!("nano: {params:.2}M params, {gflops:.2} GFLOPs at 640 (reference 4.9M / 12.4G)");
    assert!(params > 0.0 && gflops > 0.0);
}
