mod common;

use candle_core::{DType, Device, Tensor};
use drct::diagnostics::{export_trace, load_trace, render_chart, Tap};
use drct::model::TapSite;
use drct::{g_index, record_trace, IntensityTrace, ModelConfig, Network, TapLevel};
use proptest::prelude::*;
use rand::Rng;

fn random_trace(seed: u64, n: usize) -> IntensityTrace {
    let mut r = common::rng(seed);
    let extrema: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let a = r.random_range(-5.0..5.0);
            let b = r.random_range(-5.0..5.0);
            (f64::min(a, b), f64::max(a, b))
        })
        .collect();
    IntensityTrace::from_extrema("random", &extrema).unwrap()
}

#[test]
fn hand_example() {
    let t = IntensityTrace::from_extrema("hand", &[(0.0, 1.0), (0.2, 0.8), (-0.1, 1.3)]).unwrap();
    assert!((g_index(&t).unwrap() - 1.2).abs() < 1e-12);
    assert!((g_index(&t.reversed()).unwrap() - 1.2).abs() < 1e-12);
}

#[test]
fn random_traces_are_non_negative_and_constant_traces_zero() {
    for seed in 0..100 {
        let n = 2 + (seed as usize % 9);
        assert!(g_index(&random_trace(seed, n)).unwrap() >= 0.0);
        let mut r = common::rng(1000 + seed);
        let (lo, hi) = (r.random_range(-3.0..0.0), r.random_range(0.0..3.0));
        let flat = IntensityTrace::from_extrema("flat", &vec![(lo, hi); n]).unwrap();
        assert_eq!(g_index(&flat).unwrap(), 0.0);
    }
}

#[test]
fn single_tap_and_bad_traces_rejected() {
    let one = IntensityTrace::from_extrema("one", &[(0.0, 1.0)]).unwrap();
    assert!(g_index(&one).is_err());
    assert!(IntensityTrace::from_extrema("bad", &[(1.0, 0.0), (0.0, 1.0)]).is_err());
    let tap = |i| Tap {
        name: "t".into(),
        layer_index: i,
        g_min: 0.0,
        g_max: 1.0,
    };
    assert!(IntensityTrace::new("dup", vec![tap(1), tap(1)]).is_err());
}

fn trace_net(cfg: &ModelConfig, seed: u64) -> Network {
    let net = Network::build(cfg, seed, DType::F32, &Device::Cpu).unwrap();
    common::randomize(net.params(), seed, 0.2);
    net
}

#[test]
fn recorded_extrema_match_a_full_scan() {
    let net = trace_net(&common::tiny_config(2), 3);
    let lr = common::random_image(1, 6, 7, 4);
    let x = lr.to_tensor(DType::F32, &Device::Cpu).unwrap();
    let mut scans: Vec<(TapSite, f64, f64)> = Vec::new();
    let mut probe = |site: TapSite, t: &Tensor| -> drct::Result<()> {
        let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        scans.push((site, lo, hi));
        Ok(())
    };
    net.forward_probed(&x, &mut probe).unwrap();
    for level in [TapLevel::PerRdg, TapLevel::PerSdrcb, TapLevel::PerStage] {
        let trace = record_trace(&net, &lr, "x", level).unwrap();
        let expected: Vec<_> = scans
            .iter()
            .enumerate()
            .filter(|(_, (s, _, _))| level.includes(s))
            .collect();
        assert_eq!(trace.taps.len(), expected.len());
        for (tap, (i, (site, lo, hi))) in trace.taps.iter().zip(expected) {
            assert_eq!(tap.name, site.name());
            assert_eq!(tap.layer_index, i);
            assert_eq!((tap.g_min, tap.g_max), (*lo, *hi));
        }
    }
}

#[test]
fn per_rdg_tap_count_is_groups_plus_two() {
    for k in [1, 2, 3] {
        let cfg = ModelConfig {
            num_rdg: k,
            ..common::tiny_config(2)
        };
        let net = trace_net(&cfg, 1);
        let trace = record_trace(&net, &common::random_image(1, 4, 4, 0), "x", TapLevel::PerRdg).unwrap();
        assert_eq!(trace.taps.len(), k + 2);
        assert_eq!(trace.taps[0].name, "shallow");
        assert_eq!(trace.taps.last().unwrap().name, "post_transition");
    }
}

#[test]
fn identity_network_has_flat_chain() {
    let cfg = ModelConfig {
        identity_init: true,
        ..ModelConfig::desk(2)
    };
    let net = Network::build(&cfg, 9, DType::F32, &Device::Cpu).unwrap();
    let trace = record_trace(&net, &common::random_image(1, 9, 11, 2), "x", TapLevel::PerRdg).unwrap();
    let chain = trace.chain();
    assert_eq!(chain.taps.len(), cfg.num_rdg + 1);
    assert!(chain.taps.windows(2).all(|w| (w[0].g_min, w[0].g_max) == (w[1].g_min, w[1].g_max)));
    assert_eq!(g_index(&chain).unwrap(), 0.0);
}

#[test]
fn export_roundtrip_and_chart_contract() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_trace(1, 8);
    let (png, summary) = export_trace(&a, dir.path().join("a.json")).unwrap();
    assert_eq!(load_trace(dir.path().join("a.json")).unwrap(), a);
    assert!(png.exists());
    assert_eq!(summary.x_ticks, 8);
    assert_eq!(summary.series, 2);

    let b = random_trace(2, 8);
    let both = render_chart(&[a.clone(), b], dir.path().join("both.png")).unwrap();
    assert_eq!(both.series, 4);
    assert_eq!(both.x_ticks, 8);
    let img = image::open(dir.path().join("both.png")).unwrap();
    assert_eq!((img.width(), img.height()), (both.width, both.height));
    assert!(export_trace(&a, "/proc/forbidden/a.json").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn g_index_ignores_a_global_offset(seed in 0u64..10_000, n in 2usize..12, shift in -10.0f64..10.0) {
        let t = random_trace(seed, n);
        let moved: Vec<(f64, f64)> = t.taps.iter().map(|p| (p.g_min + shift, p.g_max + shift)).collect();
        let moved = IntensityTrace::from_extrema("moved", &moved).unwrap();
        prop_assert!((g_index(&t).unwrap() - g_index(&moved).unwrap()).abs() < 1e-9);
        prop_assert!((g_index(&t).unwrap() - g_index(&t.reversed()).unwrap()).abs() < 1e-9);
    }
}
