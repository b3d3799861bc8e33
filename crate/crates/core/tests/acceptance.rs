//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Criteria 4-7 share three desk-scale training runs on the synthetic
//! dataset (full model, full model without content consistency and
//! translation losses, and a fully unpaired training set). Expect the whole
//! suite to take a while on CPU.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semipair::datamodel::{load_dataset, save_dataset, synth_generate, SemiPairedDataset, Split, SynthSpec};
use semipair::eval::{
    content_distance_probe, dice_score, evaluate_segmentation, evaluate_translation, interpolate_style,
    interpolation_values, ssim, DEFAULT_INTERP_DIM, DEFAULT_INTERP_HI, DEFAULT_INTERP_LO, DEFAULT_INTERP_STEPS,
};
use semipair::gradcheck::relative_error;
use semipair::losses::*;
use semipair::nn::{ContentCode, Model, NetConfig};
use semipair::trainer::{
    image_tensor, load_checkpoint, predict, save_checkpoint, train, CurriculumPhase, LogRecord, Predictor,
    TrainConfig, TrainOutcome, TrainOutput,
};

type Res<T> = std::result::Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Res<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

// ---------------------------------------------------------------- desk runs

/// Schedule and width used for the desk-scale runs.
fn desk_config() -> TrainConfig {
    TrainConfig {
        epochs_step1: 10,
        epochs_step2: 20,
        lr_flat_epochs: 20,
        // 8x8 bottleneck at 64x64, as K=4 gives at 128x128
        content_levels: 3,
        base_width: 8,
        // 152 training images: smaller batches and a higher rate for enough updates
        batch_size: 4,
        lr_init: 2e-4,
        seed: 7,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

fn desk_spec(n_paired: usize) -> SynthSpec {
    SynthSpec {
        n_subjects: 120,
        n_paired,
        height: 64,
        width: 64,
        ..SynthSpec::default()
    }
}

struct DeskRun {
    outcome: TrainOutcome,
    wt_dice: f64,
    ssim: f64,
    seconds: f64,
}

fn desk_run(label: &str, ds: &SemiPairedDataset, eval_ds: &SemiPairedDataset, cfg: &TrainConfig) -> Res<DeskRun> {
    let t0 = Instant::now();
    let mut outcome = train(ds, cfg, TrainOutput::none())?;
    outcome.use_best(ds)?;
    let p = Predictor {
        model: &outcome.model,
        reference_styles: &outcome.meta.reference_styles,
        batch_size: cfg.batch_size,
    };
    let seg = evaluate_segmentation(&p, eval_ds, Split::Test)?;
    let wt_dice = seg.region_aver("WT").ok_or("no WT region")?;
    let ssim = evaluate_translation(&p, eval_ds, Split::Test)?.average;
    let seconds = t0.elapsed().as_secs_f64();
    println!(
        "    run {label}: best epoch {} / {}, test WT Dice {wt_dice:.4}, SSIM {ssim:.4} ({seconds:.0} s)",
        outcome.best_epoch,
        cfg.total_epochs()
    );
    Ok(DeskRun {
        outcome,
        wt_dice,
        ssim,
        seconds,
    })
}

struct Desk {
    ds: SemiPairedDataset,
    full: DeskRun,
    ablated: DeskRun,
    unpaired: DeskRun,
}

fn desk() -> Res<Desk> {
    let ds = synth_generate(&desk_spec(24))?;
    let ds0 = synth_generate(&desk_spec(0))?;
    if ds.samples_in(Split::Test) != ds0.samples_in(Split::Test) {
        return Err("NPS variants must share the test split".into());
    }
    let cfg = desk_config();
    let full = desk_run("full", &ds, &ds, &cfg)?;
    let ablated_cfg = TrainConfig {
        use_content_consistency: false,
        use_translation_loss: false,
        ..cfg.clone()
    };
    let ablated = desk_run("w/o Cc,T", &ds, &ds, &ablated_cfg)?;
    let unpaired = desk_run("NPS=0", &ds0, &ds, &cfg)?;
    Ok(Desk {
        ds,
        full,
        ablated,
        unpaired,
    })
}

// ---------------------------------------------------------------- helpers

fn t(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(values, shape, &Device::Cpu).unwrap()
}

fn val(x: semipair::Result<Tensor>) -> Res<f64> {
    Ok(scalar(&x?)?)
}

fn random(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

struct Checks {
    n: usize,
    failures: Vec<String>,
    worst: f64,
}

impl Checks {
    fn new() -> Self {
        Self {
            n: 0,
            failures: Vec::new(),
            worst: 0.0,
        }
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.n += 1;
        let err = (got - want).abs();
        self.worst = self.worst.max(err);
        if !(err <= tol) {
            self.failures.push(format!("{name}: got {got}, want {want} (tol {tol})"));
        }
    }

    fn holds(&mut self, name: &str, ok: bool) {
        self.n += 1;
        if !ok {
            self.failures.push(name.to_string());
        }
    }

    fn verdict(self, extra: &str) -> Res<Verdict> {
        let pass = self.failures.is_empty();
        let detail = if pass {
            format!("{} checks, max abs err {:.1e}{extra}", self.n, self.worst)
        } else {
            format!("{} of {} failed: {}", self.failures.len(), self.n, self.failures.join("; "))
        };
        verdict(pass, detail)
    }
}

// ---------------------------------------------------------------- criteria

fn loss_oracles() -> Res<Verdict> {
    let t0 = Instant::now();
    let mut c = Checks::new();
    let ln = f64::ln;

    // adversarial
    let half = t(&[0.5; 8], &[2, 1, 2, 2]);
    c.close("adv all 0.5", val(adversarial_loss(&half, &half, &half))?, ln(0.5) + 0.5 * ln(0.5) + 0.5 * ln(0.5), 1e-6);
    let one = |v: f64| t(&[v], &[1, 1, 1, 1]);
    let opt = val(adversarial_loss(&one(1.0 - 1e-10), &one(1e-10), &one(1e-10)))?;
    c.holds("adv optimum approaches 0 from below", opt <= 0.0 && opt > -1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = random(3, 0.01, 0.99, &mut rng);
        let want = ln(p[0]) + 0.5 * ln(1.0 - p[1]) + 0.5 * ln(1.0 - p[2]);
        c.close("adv scalar oracle", val(adversarial_loss(&one(p[0]), &one(p[1]), &one(p[2])))?, want, 1e-9);
    }

    // classification
    let onehot = t(&[0.0, 0.0, 1.0, 0.0], &[1, 4]);
    c.close("cls one-hot", val(cls_loss_real(&onehot, &[2]))?, 0.0, 1e-6);
    let uniform = t(&[0.25; 4], &[1, 4]);
    c.close("cls uniform", val(cls_loss_real(&uniform, &[1]))?, -ln(0.25), 1e-6);
    c.close(
        "cls fake uniform",
        val(cls_loss_fake(&uniform, &[0], &uniform, &[3]))?,
        0.5 * -ln(0.25) + 0.5 * -ln(0.25),
        1e-6,
    );

    // reconstruction / translation
    let x = random(16, -1.0, 1.0, &mut rng);
    let xt = t(&x, &[1, 1, 4, 4]);
    c.close("rec identical", val(reconstruction_loss(&xt, &xt))?, 0.0, 1e-6);
    let off = |d: f64| t(&x.iter().map(|v| v + d).collect::<Vec<_>>(), &[1, 1, 4, 4]);
    c.close("rec offset 0.1", val(reconstruction_loss(&off(0.1), &xt))?, 0.1, 1e-6);
    let y = random(16, -1.0, 1.0, &mut rng);
    let brute = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
    c.close("rec 4x4 oracle", val(reconstruction_loss(&t(&y, &[1, 1, 4, 4]), &xt))?, brute, 1e-9);
    c.close("tran identical", val(supervised_translation_loss(&xt, &xt))?, 0.0, 1e-6);
    c.close("tran offset 0.05", val(supervised_translation_loss(&off(0.05), &xt))?, 0.05, 1e-6);
    let yt = t(&y, &[1, 1, 4, 4]);
    c.close(
        "tran equals rec",
        val(supervised_translation_loss(&yt, &xt))?,
        val(reconstruction_loss(&yt, &xt))?,
        1e-12,
    );

    // dice
    let ones = t(&[1.0; 4], &[4]);
    let zeros = t(&[0.0; 4], &[4]);
    c.close("dice perfect", val(dice_loss(&ones, &ones))?, -8.0 / (8.0 + 1e-7), 1e-6);
    c.close("dice disjoint", val(dice_loss(&zeros, &ones))?, 0.0, 1e-6);
    c.close(
        "dice half",
        val(dice_loss(&t(&[1.0, 0.0, 1.0, 0.0], &[4]), &t(&[1.0, 1.0, 0.0, 0.0], &[4])))?,
        -2.0 / (4.0 + 1e-7),
        1e-6,
    );

    // style consistency
    let s1 = random(8, -1.0, 1.0, &mut rng);
    let s1t = t(&s1, &[1, 8]);
    c.close("sty identical", val(style_consistency_loss(&s1t, &s1t))?, 0.0, 1e-6);
    let s2t = t(&s1.iter().map(|v| v - 0.2).collect::<Vec<_>>(), &[1, 8]);
    c.close("sty offset 0.2", val(style_consistency_loss(&s1t, &s2t))?, 0.2, 1e-6);
    let s3t = t(&random(8, -1.0, 1.0, &mut rng), &[1, 8]);
    c.close(
        "sty symmetric",
        val(style_consistency_loss(&s1t, &s3t))?,
        val(style_consistency_loss(&s3t, &s1t))?,
        1e-12,
    );

    // content consistency over the bottleneck
    let a: Vec<f64> = random(8, -1.0, 1.0, &mut rng);
    let b: Vec<f64> = random(8, -1.0, 1.0, &mut rng);
    let code = |v: &[f64], skip: f64| ContentCode {
        levels: vec![t(&[skip; 32], &[1, 2, 4, 4]), t(v, &[1, 2, 2, 2])],
    };
    c.close("con identical", val(content_consistency_loss(&code(&a, 0.0), &code(&a, 0.0)))?, 0.0, 1e-6);
    c.close(
        "con symmetric",
        val(content_consistency_loss(&code(&a, 0.0), &code(&b, 1.0)))?,
        val(content_consistency_loss(&code(&b, 1.0), &code(&a, 0.0)))?,
        1e-12,
    );
    let brute = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 8.0;
    c.close("con 2x2 oracle", val(content_consistency_loss(&code(&a, 0.0), &code(&b, 0.5)))?, brute, 1e-9);

    // style L2
    c.close("l2 zero", val(style_l2_regularizer(&t(&[0.0; 8], &[1, 8])))?, 0.0, 1e-6);
    let mut unit = [0.0; 8];
    unit[3] = 1.0;
    c.close("l2 unit", val(style_l2_regularizer(&t(&unit, &[1, 8])))?, 0.125, 1e-6);
    let s = random(8, -1.0, 1.0, &mut rng);
    let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
    c.close(
        "l2 quadratic",
        val(style_l2_regularizer(&t(&twice, &[1, 8])))?,
        4.0 * val(style_l2_regularizer(&t(&s, &[1, 8])))?,
        1e-9,
    );

    // composition
    let w = LossWeights::default();
    let zero_terms = |p: Pattern| -> BTreeMap<Term, f64> { l_g_coefficients(p, &w).into_iter().map(|(t, _)| (t, 0.0)).collect() };
    for p in [Pattern::Intra, Pattern::PairedInter, Pattern::UnpairedInter] {
        c.close("compose zero", compose_l_g(p, &w, &zero_terms(p))?, 0.0, 1e-6);
    }
    c.close("compose L_D zero", compose_l_d(&BTreeMap::from([(Term::Adv, 0.0), (Term::ClsReal, 0.0)]))?, 0.0, 1e-6);
    let mut rec = zero_terms(Pattern::UnpairedInter);
    rec.insert(Term::Rec, 0.1);
    c.close("compose rec", compose_l_g(Pattern::UnpairedInter, &w, &rec)?, 5.0, 1e-6);
    let mut tran = zero_terms(Pattern::PairedInter);
    tran.insert(Term::Tran, 0.02);
    c.close("compose tran", compose_l_g(Pattern::PairedInter, &w, &tran)?, 2.0, 1e-6);
    let missing: BTreeMap<Term, f64> = BTreeMap::from([(Term::Rec, 0.1)]);
    c.holds("compose missing term fails", compose_l_g(Pattern::PairedInter, &w, &missing).is_err());

    let secs = t0.elapsed().as_secs_f64();
    c.holds("runtime < 10 s", secs < 10.0);
    c.verdict(&format!(", {secs:.2} s"))
}

fn gradient_suite() -> Res<Verdict> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_loss: f64 = 0.0;
    let mut worst_net: f64 = 0.0;
    let mut failures = Vec::new();
    let h = 1e-6;

    let mut check_loss = |name: &str, err: f64| {
        worst_loss = worst_loss.max(err);
        if !(err < 1e-6) {
            failures.push(format!("{name} {err:.2e}"));
        }
    };
    let probs = |n: usize, rng: &mut ChaCha8Rng| random(n, 0.05, 0.95, rng);
    let (p1, p2) = (t(&probs(8, &mut rng), &[2, 1, 2, 2]), t(&probs(8, &mut rng), &[2, 1, 2, 2]));
    let p0 = t(&probs(8, &mut rng), &[2, 1, 2, 2]);
    check_loss("adversarial", relative_error(|x| adversarial_loss(x, &p1, &p2), &p0, h)?);
    check_loss("adversarial (fake)", relative_error(|x| adversarial_loss(&p0, x, &p2), &p1, h)?);
    let logits = t(&random(8, -1.0, 1.0, &mut rng), &[2, 4]);
    let soft = |x: &Tensor| -> semipair::Result<Tensor> { semipair::nn::layers::softmax_last(x) };
    check_loss("cls real", relative_error(|x| cls_loss_real(&soft(x)?, &[1, 3]), &logits, h)?);
    let other = soft(&t(&random(8, -1.0, 1.0, &mut rng), &[2, 4]))?;
    check_loss("cls fake", relative_error(|x| cls_loss_fake(&soft(x)?, &[0, 2], &other, &[1, 1]), &logits, h)?);
    let target = t(&random(16, -1.0, 1.0, &mut rng), &[1, 1, 4, 4]);
    let x0 = t(&random(16, -1.0, 1.0, &mut rng), &[1, 1, 4, 4]);
    check_loss("reconstruction", relative_error(|x| reconstruction_loss(x, &target), &x0, h)?);
    check_loss("translation", relative_error(|x| supervised_translation_loss(x, &target), &x0, h)?);
    let s0 = t(&random(8, -1.0, 1.0, &mut rng), &[1, 8]);
    let s1 = t(&random(8, -1.0, 1.0, &mut rng), &[1, 8]);
    check_loss("style consistency", relative_error(|x| style_consistency_loss(x, &s1), &s0, h)?);
    check_loss("style l2", relative_error(style_l2_regularizer, &s0, h)?);
    let other_code = ContentCode {
        levels: vec![t(&random(8, -1.0, 1.0, &mut rng), &[1, 2, 2, 2])],
    };
    let b0 = t(&random(8, -1.0, 1.0, &mut rng), &[1, 2, 2, 2]);
    check_loss(
        "content consistency",
        relative_error(|x| content_consistency_loss(&ContentCode { levels: vec![x.clone()] }, &other_code), &b0, h)?,
    );
    let label = t(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], &[1, 2, 2, 2]);
    let pred0 = t(&probs(8, &mut rng), &[1, 2, 2, 2]);
    check_loss("dice", relative_error(|x| dice_loss(x, &label), &pred0, h)?);
    check_loss("segmentation", relative_error(|x| segmentation_loss(x, &label), &pred0, h)?);

    // scalar readouts through each network
    let cfg = NetConfig {
        base_width: 4,
        style_hidden: 8,
        content_levels: 2,
        disc_downsamples: 2,
        ..NetConfig::default()
    };
    let model = Model::new(cfg.clone(), 8, 8, 3, DType::F64, &Device::Cpu)?;
    let x0 = t(&random(64, -1.0, 1.0, &mut rng), &[1, 1, 8, 8]);
    let m = [2usize];
    let mut check_net = |name: &str, err: f64| {
        worst_net = worst_net.max(err);
        if !(err < 1e-3) {
            failures.push(format!("{name} {err:.2e}"));
        }
    };
    let readout = |y: &Tensor, seed: u64| -> semipair::Result<Tensor> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = t(&random(y.elem_count(), -1.0, 1.0, &mut r), y.dims());
        Ok((y * w)?.sum_all()?)
    };
    check_net("style encoder", relative_error(|x| readout(&model.encode_style(x, &m)?, 1), &x0, h)?);
    check_net(
        "content encoder",
        relative_error(
            |x| {
                let c = model.encode_content(x, &m)?;
                Ok((readout(&c.levels[0], 2)? + readout(c.bottleneck(), 3)?)?)
            },
            &x0,
            h,
        )?,
    );
    let xin = image_tensor(&[&Array2::from_shape_fn((8, 8), |(i, j)| ((i * 8 + j) as f32 / 32.0) - 1.0)], DType::F64, &Device::Cpu)?;
    let code = model.encode_content(&xin, &m)?.detach();
    let style0 = t(&random(8, -1.0, 1.0, &mut rng), &[1, 8]);
    check_net("translation decoder", relative_error(|s| readout(&model.decode_translation(&code, s)?, 4), &style0, h)?);
    let bott0 = code.bottleneck().clone();
    check_net(
        "segmentation decoder",
        relative_error(
            |b| {
                let c = ContentCode {
                    levels: vec![code.levels[0].clone(), b.clone()],
                };
                readout(&model.decode_segmentation(&c)?, 5)
            },
            &bott0,
            h,
        )?,
    );
    check_net(
        "discriminator",
        relative_error(
            |x| {
                let d = model.discriminate(x)?;
                Ok((readout(&d.src, 6)? + readout(&d.cls, 7)?)?)
            },
            &x0,
            h,
        )?,
    );

    let secs = t0.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("runtime {secs:.0} s"));
    }
    let pass = failures.is_empty();
    verdict(
        pass,
        if pass {
            format!("11 losses max rel err {worst_loss:.1e}, 5 networks max rel err {worst_net:.1e}, {secs:.1} s")
        } else {
            failures.join("; ")
        },
    )
}

fn curriculum_conformance() -> Res<Verdict> {
    let ds = synth_generate(&SynthSpec {
        n_subjects: 12,
        n_train: 8,
        n_val: 2,
        n_test: 2,
        n_paired: 2,
        height: 16,
        width: 16,
        ..SynthSpec::default()
    })?;
    // default schedule, tiny network
    let cfg = TrainConfig {
        base_width: 4,
        style_hidden: 8,
        content_levels: 2,
        disc_downsamples: 2,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };
    let mut c = Checks::new();
    c.holds("20 + 30 epochs", (cfg.epochs_step1, cfg.epochs_step2) == (20, 30));
    c.holds("lr_at(40) = 1e-4", cfg.lr_at(40)? == 1e-4);
    c.holds("lr_at(50) = 1e-6", cfg.lr_at(50)? == 1e-6);
    let out = train(&ds, &cfg, TrainOutput::none())?;
    let log = &out.log;

    let step1 = |r: &LogRecord| r.phase == CurriculumPhase::Step1StyleConsistent;
    let epochs: std::collections::BTreeSet<usize> = log.iter().map(|r| r.epoch).collect();
    c.holds("every epoch logged", epochs == (1..=50).collect());
    c.holds("epochs 1-20 are Step1", log.iter().filter(|r| r.epoch <= 20).all(step1));
    c.holds("epochs 21-50 are Step2", log.iter().filter(|r| r.epoch > 20).all(|r| !step1(r)));

    let mut iterations: BTreeMap<(usize, usize), Vec<CurriculumPhase>> = BTreeMap::new();
    for r in log.iter().filter(|r| r.epoch > 20) {
        iterations.entry((r.epoch, r.step)).or_default().push(r.phase);
    }
    c.holds(
        "one paired + one unpaired round per Step2 iteration",
        !iterations.is_empty()
            && iterations
                .values()
                .all(|p| p == &[CurriculumPhase::Step2PairedInter, CurriculumPhase::Step2UnpairedInter]),
    );
    let has = |r: &LogRecord, t: Term| r.report.terms.contains_key(&t);
    let paired = |r: &LogRecord| r.phase == CurriculumPhase::Step2PairedInter;
    c.holds(
        "con/tran only (and always) in paired rounds",
        log.iter().all(|r| has(r, Term::Con) == paired(r) && has(r, Term::Tran) == paired(r)),
    );
    c.holds("sty only (and always) in Step1", log.iter().all(|r| has(r, Term::Sty) == step1(r)));
    c.verdict(&format!(", {} logged rounds over {} Step2 iterations", log.len(), iterations.len()))
}

fn desk_training(d: &Desk) -> Res<Verdict> {
    let f = &d.full;
    verdict(
        f.wt_dice >= 0.80 && f.ssim >= 0.70,
        format!(
            "test WT Dice {:.4} (>= 0.80), SSIM {:.4} (>= 0.70), {} epochs in {:.0} s",
            f.wt_dice,
            f.ssim,
            f.outcome.meta.train.total_epochs(),
            f.seconds
        ),
    )
}

fn disentanglement(d: &Desk) -> Res<Verdict> {
    let model = &d.full.outcome.model;
    let probe = content_distance_probe(model, &d.ds, Split::Test, 17)?;
    let values = interpolation_values(DEFAULT_INTERP_LO, DEFAULT_INTERP_HI, DEFAULT_INTERP_STEPS)?;
    let mut identical = true;
    let mut n = 0;
    for s in d.ds.samples_in(Split::Test).into_iter().take(8) {
        let out = interpolate_style(model, s, DEFAULT_INTERP_DIM, &values)?;
        identical &= out.segmentations.iter().all(|m| m == &out.segmentations[0]);
        n += 1;
    }
    verdict(
        probe.paired_l1 < probe.random_l1 && probe.ratio < 0.8 && identical,
        format!(
            "bottleneck L1 paired {:.4} vs random {:.4}, ratio {:.3} (< 0.8); segmentation bit-identical over {} values x {n} images: {identical}",
            probe.paired_l1,
            probe.random_l1,
            probe.ratio,
            values.len()
        ),
    )
}

fn ablation(d: &Desk) -> Res<Verdict> {
    let (f, a) = (&d.full, &d.ablated);
    verdict(
        f.wt_dice >= a.wt_dice - 0.01 && f.ssim >= a.ssim,
        format!(
            "full Dice {:.4} vs w/o Cc,T {:.4} (-0.01 slack); full SSIM {:.4} vs {:.4}",
            f.wt_dice, a.wt_dice, f.ssim, a.ssim
        ),
    )
}

fn nps(d: &Desk) -> Res<Verdict> {
    let (p, u) = (&d.full, &d.unpaired);
    let finite = p.outcome.log.iter().chain(&u.outcome.log).all(|r| r.report.l_g.is_finite());
    verdict(
        finite && p.ssim >= u.ssim,
        format!("SSIM NPS=24 {:.4} vs NPS=0 {:.4}; both runs completed with finite losses: {finite}", p.ssim, u.ssim),
    )
}

fn determinism() -> Res<Verdict> {
    let spec = SynthSpec {
        n_subjects: 16,
        n_train: 10,
        n_val: 3,
        n_test: 3,
        n_paired: 3,
        height: 16,
        width: 16,
        seed: 4,
        ..SynthSpec::default()
    };
    let ds = synth_generate(&spec)?;
    let cfg = TrainConfig {
        epochs_step1: 2,
        epochs_step2: 2,
        lr_flat_epochs: 2,
        base_width: 4,
        style_hidden: 8,
        content_levels: 2,
        disc_downsamples: 2,
        checkpoint_interval: 0,
        seed: 21,
        ..TrainConfig::default()
    };
    let mut c = Checks::new();
    let a = train(&ds, &cfg, TrainOutput::none())?;
    let b = train(&ds, &cfg, TrainOutput::none())?;
    c.holds("identical seed gives identical logs", a.log == b.log && !a.log.is_empty());
    let other = train(&ds, &TrainConfig { seed: 22, ..cfg.clone() }, TrainOutput::none())?;
    c.holds("different seed gives different logs", a.log != other.log);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.bin");
    save_checkpoint(&a.model, &a.meta, cfg.total_epochs(), &ds.config_hash, &path)?;
    let (restored, meta, _) = load_checkpoint(&path)?;
    let samples = ds.samples_in(Split::Test);
    c.holds("checkpoint round trip: identical predictions", predict(&restored, &samples, 4)? == predict(&a.model, &samples, 4)?);
    c.holds("checkpoint round trip: identical metadata", meta == a.meta);

    let root = dir.path().join("data");
    save_dataset(&ds, &root)?;
    let back = load_dataset(&root)?;
    c.holds("dataset round trip: identical records", back.records == ds.records);
    c.holds(
        "dataset round trip: identical arrays",
        ds.samples.iter().all(|(k, s)| back.samples.get(k).is_some_and(|t| t.image == s.image && t.mask == s.mask))
            && back.samples.len() == ds.samples.len(),
    );
    let oracle_same = match (&ds.oracle, &back.oracle) {
        (Some(o1), Some(o2)) => ds
            .records
            .iter()
            .all(|r| (0..ds.n_modalities()).all(|m| o1.ground_truth(&r.subject_id, m).ok() == o2.ground_truth(&r.subject_id, m).ok())),
        _ => false,
    };
    c.holds("dataset round trip: identical analytic targets", oracle_same);
    c.holds("dataset round trip: same hash", back.config_hash == ds.config_hash);
    c.verdict("")
}

fn dice_brute(p: &Array2<u8>, g: &Array2<u8>) -> f64 {
    let (mut inter, mut sp, mut sg) = (0u32, 0u32, 0u32);
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let (a, b) = (p[[i, j]] as u32, g[[i, j]] as u32);
            inter += a * b;
            sp += a;
            sg += b;
        }
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}

/// Direct per-window evaluation with a two-dimensional Gaussian kernel and
/// centered second moments.
fn ssim_brute(x: &Array2<f32>, y: &Array2<f32>) -> f64 {
    let n = 11usize;
    let sigma: f64 = 1.5;
    let mut kernel = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            kernel[[a, b]] = (-(da * da + db * db) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total = kernel.sum();
    kernel.mapv_inplace(|v| v / total);
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    let (h, w) = x.dim();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let win = |img: &Array2<f32>, a: usize, b: usize| img[[i + a, j + b]] as f64;
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    mx += kernel[[a, b]] * win(x, a, b);
                    my += kernel[[a, b]] * win(y, a, b);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let (dx, dy) = (win(x, a, b) - mx, win(y, a, b) - my);
                    vx += kernel[[a, b]] * dx * dx;
                    vy += kernel[[a, b]] * dy * dy;
                    cov += kernel[[a, b]] * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    sum / count
}

fn metric_oracles() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut c = Checks::new();
    for case in 0..20 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let density = rng.random_range(0.0..1.0);
        let mut mask = || Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(density)));
        let (p, g) = (mask(), mask());
        c.close(&format!("dice case {case}"), dice_score(p.view(), g.view())?, dice_brute(&p, &g), 1e-9);
    }
    for case in 0..20 {
        let (h, w) = (rng.random_range(11..20), rng.random_range(11..20));
        let x = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..1.0));
        let mix = rng.random_range(0.0f32..1.0);
        let y = Array2::from_shape_fn((h, w), |(i, j)| mix * x[[i, j]] + (1.0 - mix) * rng.random_range(-1.0f32..1.0));
        c.close(&format!("ssim case {case}"), ssim(x.view(), y.view())?, ssim_brute(&x, &y), 1e-6);
    }
    c.verdict("")
}

/// Criterion numbers given as arguments restrict the run; none runs all nine.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=9).collect()
    } else {
        picked
    }
}

fn main() {
    let started = Instant::now();
    let want = selected();
    let cheap: [(usize, &str, fn() -> Res<Verdict>); 5] = [
        (1, "loss oracle suite", loss_oracles),
        (2, "gradient suite", gradient_suite),
        (3, "curriculum conformance", curriculum_conformance),
        (8, "determinism and persistence", determinism),
        (9, "metric correctness", metric_oracles),
    ];
    let mut results: Vec<(usize, &str, Res<Verdict>)> = Vec::new();
    for (i, name, f) in cheap {
        if want.contains(&i) {
            results.push((i, name, f()));
        }
    }
    let desk_criteria: [(usize, &str, fn(&Desk) -> Res<Verdict>); 4] = [
        (4, "desk-scale training", desk_training),
        (5, "disentanglement", disentanglement),
        (6, "ablation direction", ablation),
        (7, "NPS smoke test", nps),
    ];
    if desk_criteria.iter().any(|(i, _, _)| want.contains(i)) {
        println!("    training desk-scale runs (full, w/o Cc,T, NPS=0)");
        let d = desk();
        for (i, name, f) in desk_criteria {
            if want.contains(&i) {
                let r = match &d {
                    Ok(d) => f(d),
                    Err(e) => Err(format!("desk runs failed: {e}").into()),
                };
                results.push((i, name, r));
            }
        }
    }
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (i, name, r) in &results {
        let (tag, detail) = match r {
            Ok(v) => (if v.pass { "PASS" } else { "FAIL" }, v.detail.clone()),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {i} [{tag}] {name}: {detail}");
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
