use super::*;
use crate::raster::Grid;
use proptest::prelude::*;
use rand::RngExt;

fn map_from(h: usize, w: usize, c: usize, values: &[(usize, &[f64])]) -> FeatureMap {
    let mut m = FeatureMap::zeros(h, w, c);
    for &(p, v) in values {
        m.pixel_mut(p).copy_from_slice(v);
    }
    m
}

fn region(id: usize, class: usize, fg: &[usize], occ: &[usize]) -> InstanceRegion {
    InstanceRegion {
        instance_id: id,
        class_id: class,
        fg: fg.to_vec(),
        occ: occ.to_vec(),
    }
}

fn cfg() -> LossConfig {
    LossConfig::default()
}

#[test]
fn defaults_match_published_hyperparameters() {
    let c = LossConfig::default();
    assert_eq!((c.alpha, c.beta, c.gamma), (1.0, 1.0, 1.0));
    assert_eq!((c.d_var, c.d_dst), (0.5, 1.5));
    assert!(c.validate().is_ok());
    assert!(LossConfig { d_dst: 0.4, ..c }.validate().is_err());
    assert!(LossConfig { alpha: -1.0, ..c }.validate().is_err());
}

#[test]
fn mean_of_singleton() {
    let fg = map_from(1, 3, 2, &[(0, &[0.3, -1.2])]);
    let occ = FeatureMap::zeros(1, 3, 2);
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0], &[])],
    };
    assert_eq!(
        instance_means(&fg, &occ, &regions).unwrap(),
        vec![vec![0.3, -1.2]]
    );
}

#[test]
fn mean_pools_both_layers() {
    // fg pixel 0 holds (0,0); occ pixel 1 holds (2,0).
    let fg = map_from(1, 2, 2, &[(0, &[0.0, 0.0])]);
    let occ = map_from(1, 2, 2, &[(1, &[2.0, 0.0])]);
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0], &[1])],
    };
    assert_eq!(
        instance_means(&fg, &occ, &regions).unwrap(),
        vec![vec![1.0, 0.0]]
    );
}

#[test]
fn constant_field_means() {
    let mut fg = FeatureMap::zeros(2, 2, 3);
    fg.data
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = [0.5, -2.0, 7.0][i % 3]);
    let occ = fg.clone();
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0, 1], &[2]), region(1, 1, &[2, 3], &[0])],
    };
    for mu in instance_means(&fg, &occ, &regions).unwrap() {
        assert_eq!(mu, vec![0.5, -2.0, 7.0]);
    }
}

#[test]
fn empty_instance_is_an_error() {
    let fg = FeatureMap::zeros(1, 1, 1);
    let regions = InstanceRegions {
        instances: vec![region(4, 0, &[], &[])],
    };
    assert!(matches!(
        instance_means(&fg, &fg, &regions),
        Err(Error::EmptyInstance { instance: 4 })
    ));
}

#[test]
fn variance_boundary_and_active_cases() {
    let occ = FeatureMap::zeros(1, 2, 2);
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0, 1], &[])],
    };
    // (0,0) and (1,0): mu=(0.5,0), distances 0.5 = d_var.
    let fg = map_from(1, 2, 2, &[(0, &[0.0, 0.0]), (1, &[1.0, 0.0])]);
    let mu = instance_means(&fg, &occ, &regions).unwrap();
    assert_eq!(mu[0], vec![0.5, 0.0]);
    assert_eq!(variance_loss(&fg, &occ, &regions, &mu, &cfg()), 0.0);
    // (0,0) and (2,0): distances 1, hinge 0.5 each -> 0.25.
    let fg = map_from(1, 2, 2, &[(0, &[0.0, 0.0]), (1, &[2.0, 0.0])]);
    let mu = instance_means(&fg, &occ, &regions).unwrap();
    assert!((variance_loss(&fg, &occ, &regions, &mu, &cfg()) - 0.25).abs() < 1e-15);
}

#[test]
fn distance_loss_cases() {
    let c = cfg();
    let far = vec![vec![0.0, 0.0], vec![3.0, 0.0]];
    assert_eq!(distance_loss(&far, &[0, 0], &c), 0.0);
    let near = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    assert!((distance_loss(&near, &[0, 0], &c) - 4.0).abs() < 1e-15);
    assert_eq!(distance_loss(&near, &[0, 1], &c), 0.0);
    assert_eq!(distance_loss(&near[..1], &[0], &c), 0.0);
}

#[test]
fn regularization_cases() {
    assert_eq!(regularization_loss(&[vec![0.0, 0.0], vec![0.0, 0.0]]), 0.0);
    assert_eq!(regularization_loss(&[vec![1.0, -2.0]]), 3.0);
    assert_eq!(regularization_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 1.0);
}

fn labels(h: usize, w: usize, v: Vec<u16>) -> LabelMap {
    Grid::from_vec(w, h, v).unwrap()
}

/// Two instances of one class, constant embeddings far apart: only l_reg and
/// semantics remain.
#[test]
fn zero_variance_and_distance_configuration() {
    let fg = map_from(
        1,
        4,
        2,
        &[
            (0, &[3.0, 0.0]),
            (1, &[3.0, 0.0]),
            (2, &[0.0, -1.0]),
            (3, &[0.0, -1.0]),
        ],
    );
    let occ = map_from(1, 4, 2, &[(2, &[3.0, 0.0])]);
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0, 1], &[2]), region(1, 0, &[2, 3], &[])],
    };
    let logits = FeatureMap::zeros(1, 4, 2);
    let lab = labels(1, 4, vec![1, 1, 1, 1]);
    let inputs = LossInputs {
        fg_embed: &fg,
        occ_embed: &occ,
        fg_logits: &logits,
        occ_logits: &logits,
        regions: &regions,
        fg_class: &lab,
        occ_class: &lab,
    };
    let b = total_loss(&inputs, &cfg()).unwrap();
    assert_eq!(b.l_var, 0.0);
    assert_eq!(b.l_dst, 0.0);
    assert_eq!(b.l_reg, 2.0);
    assert!((b.l_semantic - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((b.total - (b.l_reg + b.l_semantic)).abs() < 1e-12);

    let zero = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        semantic_weight: 0.0,
        ..cfg()
    };
    assert_eq!(total_loss(&inputs, &zero).unwrap().total, 0.0);
}

#[test]
fn inactive_variance_has_zero_embedding_gradient() {
    let fg = map_from(1, 2, 2, &[(0, &[0.1, 0.0]), (1, &[0.3, 0.0])]);
    let occ = FeatureMap::zeros(1, 2, 2);
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0, 1], &[])],
    };
    let logits = FeatureMap::zeros(1, 2, 1);
    let lab = labels(1, 2, vec![0, 0]);
    let inputs = LossInputs {
        fg_embed: &fg,
        occ_embed: &occ,
        fg_logits: &logits,
        occ_logits: &logits,
        regions: &regions,
        fg_class: &lab,
        occ_class: &lab,
    };
    let only_var = LossConfig {
        beta: 0.0,
        gamma: 0.0,
        semantic_weight: 0.0,
        ..cfg()
    };
    let (b, g) = loss_gradient(&inputs, &only_var).unwrap();
    assert_eq!(b.l_var, 0.0);
    assert!(g.fg_embed.data.iter().all(|&v| v == 0.0));
}

#[test]
fn regularization_gradient_is_sign() {
    // Single pixel instance with mu = (2.0, 0.0): d l_reg / d mu = (1, 0).
    let fg = map_from(1, 1, 2, &[(0, &[2.0, 0.0])]);
    let occ = FeatureMap::zeros(1, 1, 2);
    let regions = InstanceRegions {
        instances: vec![region(0, 0, &[0], &[])],
    };
    let logits = FeatureMap::zeros(1, 1, 1);
    let lab = labels(1, 1, vec![0]);
    let inputs = LossInputs {
        fg_embed: &fg,
        occ_embed: &occ,
        fg_logits: &logits,
        occ_logits: &logits,
        regions: &regions,
        fg_class: &lab,
        occ_class: &lab,
    };
    let (_, g) = loss_gradient(&inputs, &cfg()).unwrap();
    assert_eq!(g.fg_embed.pixel(0), &[1.0, 0.0]);
}

/// Random small problem: 8x8 maps, `c` channels, instances covering random
/// pixels in both layers.
pub(crate) struct Problem {
    pub fg: FeatureMap,
    pub occ: FeatureMap,
    pub fg_logits: FeatureMap,
    pub occ_logits: FeatureMap,
    pub regions: InstanceRegions,
    pub fg_class: LabelMap,
    pub occ_class: LabelMap,
}

impl Problem {
    pub fn random(seed: u64, c: usize, instances: usize, classes: usize) -> Self {
        let mut rng = crate::rng::stream(seed);
        let (h, w) = (8, 8);
        let k = classes + 1;
        let mut fg_inst = vec![0u16; h * w];
        let mut occ_inst = vec![0u16; h * w];
        for p in 0..h * w {
            let top = rng.random_range(0..=instances);
            fg_inst[p] = top as u16;
            if top > 0 && rng.random_bool(0.4) {
                let other = rng.random_range(1..=instances);
                if other != top {
                    occ_inst[p] = other as u16;
                }
            }
        }
        // Make sure every instance shows up.
        for i in 0..instances {
            fg_inst[i] = i as u16 + 1;
        }
        let class_of: Vec<usize> = (0..instances).map(|i| i % classes).collect();
        let fgl = labels(h, w, fg_inst);
        let occl = labels(h, w, occ_inst);
        let regions = InstanceRegions::from_label_maps(&fgl, &occl, &class_of).unwrap();
        let to_class = |m: &LabelMap| {
            labels(
                h,
                w,
                m.data
                    .iter()
                    .map(|&v| {
                        if v == 0 {
                            0
                        } else {
                            class_of[v as usize - 1] as u16 + 1
                        }
                    })
                    .collect(),
            )
        };
        let mut rand_map = |ch: usize, scale: f64| {
            let mut m = FeatureMap::zeros(h, w, ch);
            m.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
            m
        };
        let fg = rand_map(c, 1.5);
        let occ = rand_map(c, 1.5);
        let fg_logits = rand_map(k, 2.0);
        let occ_logits = rand_map(k, 2.0);
        Self {
            fg_class: to_class(&fgl),
            occ_class: to_class(&occl),
            fg,
            occ,
            fg_logits,
            occ_logits,
            regions,
        }
    }

    fn slot(&mut self, which: usize) -> &mut Vec<f64> {
        match which {
            0 => &mut self.fg.data,
            1 => &mut self.occ.data,
            2 => &mut self.fg_logits.data,
            _ => &mut self.occ_logits.data,
        }
    }

    pub fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            fg_embed: &self.fg,
            occ_embed: &self.occ,
            fg_logits: &self.fg_logits,
            occ_logits: &self.occ_logits,
            regions: &self.regions,
            fg_class: &self.fg_class,
            occ_class: &self.occ_class,
        }
    }
}

/// Sign pattern of every piecewise branch in the loss (hinges and L1
/// coordinates). Recomputed from the definitions, so a finite-difference
/// stencil that crosses a kink can be detected.
pub(crate) fn kink_signature(p: &Problem, cfg: &LossConfig) -> Vec<i8> {
    super::kink_signature(&p.fg, &p.occ, &p.regions, cfg).unwrap()
}

pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences over every input coordinate; returns the worst
/// relative error over coordinates whose stencil stays on one side of every kink.
pub(crate) fn max_fd_error(p: &mut Problem, cfg: &LossConfig, h: f64) -> (f64, usize) {
    let (_, grad) = loss_gradient(&p.inputs(), cfg).unwrap();
    let base_sig = kink_signature(p, cfg);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for which in 0..4 {
        let len = p.slot(which).len();
        for i in 0..len {
            let orig = p.slot(which)[i];
            p.slot(which)[i] = orig + h;
            let plus = total_loss(&p.inputs(), cfg).unwrap().total;
            let sig_plus = kink_signature(p, cfg);
            p.slot(which)[i] = orig - h;
            let minus = total_loss(&p.inputs(), cfg).unwrap().total;
            let sig_minus = kink_signature(p, cfg);
            p.slot(which)[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = match which {
                0 => grad.fg_embed.data[i],
                1 => grad.occ_embed.data[i],
                2 => grad.fg_logits.data[i],
                _ => grad.occ_logits.data[i],
            };
            if analytic == 0.0 && numeric.abs() < 1e-10 {
                checked += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..24 {
        let mut p = Problem::random(seed, 3, 2, 1);
        let (worst, checked) = max_fd_error(&mut p, &cfg(), 1e-4);
        assert!(
            checked > 300,
            "seed {seed}: only {checked} coordinates checked"
        );
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn gradient_matches_with_several_classes() {
    let c = LossConfig {
        alpha: 0.7,
        beta: 1.3,
        gamma: 0.4,
        semantic_weight: 2.0,
        ..cfg()
    };
    for seed in 100..106 {
        let mut p = Problem::random(seed, 4, 5, 2);
        let (worst, _) = max_fd_error(&mut p, &c, 1e-4);
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn permutation_invariance() {
    let p = Problem::random(7, 3, 4, 2);
    let base = total_loss(&p.inputs(), &cfg()).unwrap();
    let mut q = Problem::random(7, 3, 4, 2);
    q.regions.instances.reverse();
    for (new_id, r) in q.regions.instances.iter_mut().enumerate() {
        r.instance_id = new_id;
    }
    let perm = total_loss(&q.inputs(), &cfg()).unwrap();
    for (a, b) in [
        (base.l_var, perm.l_var),
        (base.l_dst, perm.l_dst),
        (base.l_reg, perm.l_reg),
        (base.total, perm.total),
    ] {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn translation_invariance_of_var_and_dst_only() {
    let p = Problem::random(3, 3, 4, 1);
    let base = total_loss(&p.inputs(), &cfg()).unwrap();
    let mut q = Problem::random(3, 3, 4, 1);
    let shift = [0.7, -1.1, 2.5];
    for m in [&mut q.fg, &mut q.occ] {
        for (i, v) in m.data.iter_mut().enumerate() {
            *v += shift[i % 3];
        }
    }
    let moved = total_loss(&q.inputs(), &cfg()).unwrap();
    assert!((base.l_var - moved.l_var).abs() < 1e-9);
    assert!((base.l_dst - moved.l_dst).abs() < 1e-9);
    assert!((base.l_reg - moved.l_reg).abs() > 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn terms_nonnegative_and_finite(seed in any::<u64>(), c in 1usize..5, n in 1usize..6, k in 1usize..3) {
        let p = Problem::random(seed, c, n, k);
        let b = total_loss(&p.inputs(), &cfg()).unwrap();
        for v in [b.l_var, b.l_dst, b.l_reg, b.l_semantic, b.total] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        let expect = b.l_var + b.l_dst + b.l_reg + b.l_semantic;
        prop_assert!((b.total - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn zero_loss_certificate(spacing in 3.0f64..10.0, n in 1usize..5) {
        // Every instance constant at n*spacing on axis 0: pairwise L1 >= 2*d_dst.
        let mut p = Problem::random(n as u64, 2, n, 1);
        let means: Vec<[f64; 2]> = (0..n).map(|i| [i as f64 * spacing, 1.0]).collect();
        for r in &p.regions.instances {
            let mu = means[r.instance_id];
            for &q in &r.fg { p.fg.pixel_mut(q).copy_from_slice(&mu); }
            for &q in &r.occ { p.occ.pixel_mut(q).copy_from_slice(&mu); }
        }
        let b = total_loss(&p.inputs(), &cfg()).unwrap();
        prop_assert_eq!(b.l_var, 0.0);
        prop_assert_eq!(b.l_dst, 0.0);
    }
}
