//! Throwaway exploration harness (ignored by default).

use std::time::Instant;

use ubw_core::data::{split_per_class, synth_patterns, RngStream};
use ubw_core::eval::{evaluate, AttackGoal};
use ubw_core::nn::{sgd_train, Arch, ModelState, PgaConfig, SgdConfig};
use ubw_core::verify::{verify_ownership, InProcessOracle, Scenario, VerificationConfig};
use ubw_core::watermark::{
    optimize_ubw_c, poison_ubw_p, BilevelConfig, Corner, SelectionRule, Trigger,
};

const HW: usize = 14;

#[test]
#[ignore]
fn probe_sweeps_and_verification() {
    let t0 = Instant::now();
    let shape = [1usize, HW, HW];

    // UBW-P context (criterion 5 family): sigma 0.1, seed 7
    let rng = RngStream::new(7);
    let full = synth_patterns(10, 130, 0.1, shape, &rng).unwrap();
    let (train, test) = split_per_class(&full, 30).unwrap();
    let arch = Arch::SmallCnn {
        in_channels: 1,
        height: HW,
        width: HW,
        conv1: 16,
        conv2: 32,
        fc: 128,
        classes: 10,
    };
    let trigger = Trigger::checker_patch(shape, 4, Corner::BottomRight, false).unwrap();
    let indep_trigger = Trigger::checker_patch(shape, 4, Corner::TopLeft, true).unwrap();
    let cfg = SgdConfig {
        lr: 0.05,
        milestones: vec![30],
        decay: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: 32,
        epochs: 40,
        augment_flip: false,
    };
    let init = ModelState::init(arch.clone(), &RngStream::new(8)).unwrap();
    let (clean_model, _) = sgd_train(&init, &train, &cfg, &RngStream::new(9), None).unwrap();

    // gamma sweep
    for gamma in [0.01, 0.05, 0.1] {
        let (p, _) = poison_ubw_p(&train, gamma, &trigger, &RngStream::new(10), false).unwrap();
        let (m, _) = sgd_train(&init, &p, &cfg, &RngStream::new(9), None).unwrap();
        let e = evaluate(&m, &test, &trigger, AttackGoal::Untargeted).unwrap();
        println!("gamma={gamma}: BA {:.3} ASR {:.3} D_p {:.3}", e.ba, e.asr_a, e.d_p);
    }

    // verification scenarios on the gamma=0.1 watermark
    let (wp_data, _) = poison_ubw_p(&train, 0.1, &trigger, &RngStream::new(10), false).unwrap();
    let (wp_model, _) = sgd_train(&init, &wp_data, &cfg, &RngStream::new(9), None).unwrap();
    let vcfg = VerificationConfig {
        tau: 0.25,
        m: 100,
        alpha: 0.01,
        seed: 99,
        source_class: None,
    };
    let wm_oracle = InProcessOracle::new(wp_model.clone());
    let clean_oracle = InProcessOracle::new(clean_model.clone());
    let malicious =
        verify_ownership(&wm_oracle, &test, &trigger, &vcfg, Scenario::Malicious).unwrap();
    let indep_m =
        verify_ownership(&clean_oracle, &test, &trigger, &vcfg, Scenario::IndependentModel)
            .unwrap();
    let indep_t = verify_ownership(
        &wm_oracle,
        &test,
        &indep_trigger,
        &vcfg,
        Scenario::IndependentTrigger,
    )
    .unwrap();
    println!(
        "malicious: dP {:.3} p {:.3e} | indep-M: dP {:.3} p {:.3} | indep-T: dP {:.3} p {:.3}",
        malicious.delta_p,
        malicious.p_value,
        indep_m.delta_p,
        indep_m.p_value,
        indep_t.delta_p,
        indep_t.p_value
    );

    // lambda sweep on the UBW-C context (criterion 7 family): sigma 0.18, seed 42
    let rngc = RngStream::new(42);
    let fullc = synth_patterns(10, 130, 0.18, shape, &rngc).unwrap();
    let (trainc, testc) = split_per_class(&fullc, 30).unwrap();
    let initc = ModelState::init(arch.clone(), &RngStream::new(43)).unwrap();
    let pre_cfg = cfg.clone();
    let victim_cfg = SgdConfig {
        epochs: 12,
        milestones: vec![],
        ..cfg.clone()
    };
    let (pretrainedc, _) = sgd_train(&initc, &trainc, &pre_cfg, &RngStream::new(44), None).unwrap();
    let (clean_victim, _) =
        sgd_train(&initc, &trainc, &victim_cfg, &RngStream::new(44), None).unwrap();
    let clean_eval = evaluate(&clean_victim, &testc, &trigger, AttackGoal::Untargeted).unwrap();
    println!("ubw-c clean victim: BA {:.3} ASR {:.3}", clean_eval.ba, clean_eval.asr_a);

    for lambda in [0.0, 1.0, 2.0] {
        let bcfg = BilevelConfig {
            lambda,
            rounds: 3,
            gamma: 0.3,
            source_class: 1,
            selection: SelectionRule::GradientNorm,
            lower: SgdConfig {
                lr: 0.05,
                milestones: vec![],
                decay: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 32,
                epochs: 4,
                augment_flip: false,
            },
            pga: PgaConfig {
                step_size: 0.03,
                steps: 80,
                epsilon: 16.0 / 255.0,
                pixel_min: 0.0,
                pixel_max: 1.0,
                sign_based: true,
            },
        };
        let out =
            optimize_ubw_c(&pretrainedc, &trainc, &bcfg, &trigger, &RngStream::new(46)).unwrap();
        let (victim, _) =
            sgd_train(&initc, &out.poisoned, &victim_cfg, &RngStream::new(44), None).unwrap();
        let e = evaluate(&victim, &testc, &trigger, AttackGoal::Untargeted).unwrap();
        println!(
            "lambda={lambda}: BA {:.3} ASR {:.3} D_p {:.3} (ratio {:.1})",
            e.ba,
            e.asr_a,
            e.d_p,
            e.asr_a / clean_eval.asr_a.max(1e-9)
        );
    }
    println!("total {:.0?}", t0.elapsed());
}
