//! End-to-end behaviour of the library commands on small synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use convse::cli::{
    cmd_eval, cmd_gen_synth, cmd_sweep, cmd_train_base, cmd_train_contrastive, train_network, OptimizerKind, RunError,
    Stage, SweepConfig, SweepParam, TrainConfig, CHECKPOINT_FILE, LOSS_CURVE_FILE, REPORT_FILE,
};
use convse::data::{synth_generate, DatasetPaths, FeatureTable, PairedDataset, Split, SynthConfig};
use convse::eval::{evaluate, fold_average, EvalError, RetrievalReport};
use convse::model::{init_identity_heads, init_network, save_checkpoint, NetworkConfig, TrainingMeta};
use convse::numerics::Rng;
use convse::optim::LrSchedule;

fn small_synth(images: usize, noise: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        latent_dim: 8,
        image_dim: 16,
        text_dim: 12,
        images,
        captions_per_image: 5,
        noise,
        seed,
    }
}

fn small_config(stage: Stage, data: &Path, out: PathBuf) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(stage);
    cfg.set("data", &data.display().to_string()).unwrap();
    cfg.out = Some(out);
    cfg.base_dim = 24;
    cfg.hidden = 32;
    cfg.dim = 16;
    cfg.batch = 32;
    cfg.epochs = 3;
    cfg.seed = 5;
    cfg
}

fn prefixed_report(text: &str, prefix: &str) -> RetrievalReport {
    let lines: String = text
        .lines()
        .filter_map(|l| l.strip_prefix(&format!("{prefix}.")))
        .map(|l| format!("{l}\n"))
        .collect();
    RetrievalReport::from_key_values(&lines).unwrap()
}

#[test]
fn gen_synth_writes_one_pairing_line_per_caption_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        images: 100,
        ..SynthConfig::default()
    };
    let a = cmd_gen_synth(&cfg, &tmp.path().join("a")).unwrap();
    let b = cmd_gen_synth(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(fs::read_to_string(&a.pairs).unwrap().lines().count(), 500);
    assert_eq!(fs::read_to_string(&a.splits).unwrap().lines().count(), 100);
    for (x, y) in [
        (&a.images, &b.images),
        (&a.captions, &b.captions),
        (&a.pairs, &b.pairs),
        (&a.splits, &b.splits),
    ] {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    let ds = PairedDataset::load(&a).unwrap();
    assert_eq!(ds.images().len(), 100);
    assert_eq!(ds.captions().len(), 500);
    assert_eq!(
        [Split::Train, Split::Val, Split::Test].map(|s| ds.split_images(s).len()),
        [80, 10, 10]
    );
}

fn test_only_dataset(images: usize, dir: &Path) -> DatasetPaths {
    let mut rng = Rng::new(3);
    let per = 5;
    let img_ids = (0..images).map(|i| format!("img{i:05}")).collect();
    let cap_ids = (0..images * per).map(|c| format!("cap{c:06}")).collect();
    let ds = PairedDataset::new(
        FeatureTable::new(img_ids, rng.normal_matrix(images, 6, 1.0)).unwrap(),
        FeatureTable::new(cap_ids, rng.normal_matrix(images * per, 5, 1.0)).unwrap(),
        (0..images * per).map(|c| c / per).collect(),
        vec![Split::Test; images],
    )
    .unwrap();
    let paths = DatasetPaths::in_dir(dir);
    fs::create_dir_all(dir).unwrap();
    ds.write(&paths).unwrap();
    paths
}

#[test]
fn fold_evaluation_reports_each_fold_and_their_average() {
    let tmp = tempfile::tempdir().unwrap();
    let paths = test_only_dataset(5000, &tmp.path().join("data"));
    let net = init_network(
        NetworkConfig {
            base_dim: 8,
            ..NetworkConfig::base(6, 5)
        },
        &mut Rng::new(1),
    )
    .unwrap();
    let ckpt = tmp.path().join("net.cvse");
    save_checkpoint(
        &net,
        &TrainingMeta {
            epoch: 0,
            seed: 1,
            loss: "MH".into(),
        },
        &ckpt,
    )
    .unwrap();

    let out = cmd_eval(&ckpt, &paths, Split::Test, Some(1000)).unwrap();
    assert_eq!(out.folds.len(), 5);
    assert_eq!(out.report, fold_average(&out.folds).unwrap());
    let rendered = out.render();
    for i in 1..=5 {
        assert!(rendered.contains(&format!("fold {i}")), "{rendered}");
    }
    assert!(rendered.contains("average"));

    let whole = cmd_eval(&ckpt, &paths, Split::Test, None).unwrap();
    assert!(whole.folds.is_empty());
    assert!(
        whole.report.rsum < out.report.rsum,
        "a 5000-image gallery is harder than 1000-image folds"
    );

    let err = cmd_eval(&ckpt, &paths, Split::Test, Some(6000)).unwrap_err();
    assert!(
        matches!(
            err,
            RunError::Eval(EvalError::FoldTooLarge {
                fold: 6000,
                available: 5000
            })
        ),
        "{err:?}"
    );
}

#[test]
fn saved_checkpoint_scores_like_the_network_in_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_synth(&small_synth(120, 0.1, 2), &data).unwrap();
    let ds = PairedDataset::load(&DatasetPaths::in_dir(&data)).unwrap();
    let cfg = small_config(Stage::Base, &data, tmp.path().join("run"));

    let net = init_network(
        NetworkConfig {
            base_dim: cfg.base_dim,
            ..NetworkConfig::base(16, 12)
        },
        &mut Rng::stream(cfg.seed, convse::cli::BASE_INIT_STREAM),
    )
    .unwrap();
    let outcome = train_network(net, &ds, &cfg, &mut |_| Ok(())).unwrap();
    let in_memory = evaluate(&outcome.network, &ds, Split::Test).unwrap();

    let run = cmd_train_base(&cfg).unwrap();
    let loaded = cmd_eval(&run.checkpoint, &DatasetPaths::in_dir(&data), Split::Test, None).unwrap();
    assert_eq!(loaded.report, in_memory);
    let report = fs::read_to_string(&run.report).unwrap();
    assert_eq!(prefixed_report(&report, "test"), in_memory);
    assert!(report.contains(&format!("selected_epoch={}", outcome.selected_epoch)));
}

#[test]
fn noiseless_data_improves_validation_within_five_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_synth(&small_synth(200, 0.0, 4), &data).unwrap();
    let mut cfg = small_config(Stage::Base, &data, tmp.path().join("run"));
    cfg.epochs = 5;
    let run = cmd_train_base(&cfg).unwrap();
    let report = fs::read_to_string(&run.report).unwrap();
    let initial = prefixed_report(&report, "initial_val");
    let best = prefixed_report(&report, "val");
    assert!(best.rsum > initial.rsum, "{report}");

    let curve = fs::read_to_string(run.dir.join(LOSS_CURVE_FILE)).unwrap();
    let rows: Vec<Vec<&str>> = curve.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        assert!(r[1].parse::<f64>().unwrap().is_finite());
        assert!(r[2].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn sgd_on_cmn_with_rate_times_tau_tracks_sgd_on_mh() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_synth(&small_synth(120, 0.1, 6), &data).unwrap();
    let ds = PairedDataset::load(&DatasetPaths::in_dir(&data)).unwrap();
    let base = init_network(
        NetworkConfig {
            base_dim: 10,
            ..NetworkConfig::base(16, 12)
        },
        &mut Rng::new(2),
    )
    .unwrap();
    let start = init_identity_heads(&base).unwrap();

    let (eta, tau) = (0.05, 0.1);
    let run = |loss: &str, lr: f64| {
        let mut cfg = small_config(Stage::Contrastive, &data, tmp.path().join(loss));
        cfg.base_dim = 10;
        cfg.identity_heads = true;
        cfg.set("loss", loss).unwrap();
        cfg.tau = tau;
        cfg.alpha = 0.2;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.lr = LrSchedule::constant(lr).unwrap();
        cfg.base_checkpoint = Some(PathBuf::from("unused.cvse"));
        let mut losses = Vec::new();
        let out = train_network(start.clone(), &ds, &cfg, &mut |r| {
            losses.push(r.loss);
            Ok(())
        })
        .unwrap();
        (out, losses)
    };
    let (mh, mh_losses) = run("MH", eta);
    let (cmn, cmn_losses) = run("CMN", eta * tau);
    for (a, b) in mh_losses.iter().zip(&cmn_losses) {
        assert!(
            (a - b * tau).abs() <= 1e-9 * a.abs().max(1e-12),
            "MH {a} vs tau*CMN {}",
            b * tau
        );
    }
    let mh_last = mh.history.last().unwrap().val.unwrap();
    let cmn_last = cmn.history.last().unwrap().val.unwrap();
    assert_eq!(mh_last, cmn_last);
    for ((_, a), (_, b)) in mh.network.tensors().iter().zip(cmn.network.tensors()) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}

#[test]
fn contrastive_stage_checks_its_base_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_synth(&small_synth(80, 0.1, 1), &data).unwrap();
    let base = cmd_train_base(&small_config(Stage::Base, &data, tmp.path().join("base"))).unwrap();

    let mut cfg = small_config(Stage::Contrastive, &data, tmp.path().join("ok"));
    cfg.base_checkpoint = Some(base.checkpoint.clone());
    let ok = cmd_train_contrastive(&cfg).unwrap();
    for f in [CHECKPOINT_FILE, REPORT_FILE, LOSS_CURVE_FILE] {
        assert!(ok.dir.join(f).exists());
    }

    // a checkpoint that already carries heads is not a base
    let mut again = small_config(Stage::Contrastive, &data, tmp.path().join("twice"));
    again.base_checkpoint = Some(ok.checkpoint.clone());
    assert!(cmd_train_contrastive(&again).is_err());
    assert!(!tmp.path().join("twice").exists());

    let mut wrong_dim = small_config(Stage::Contrastive, &data, tmp.path().join("dim"));
    wrong_dim.base_dim = 7;
    wrong_dim.base_checkpoint = Some(base.checkpoint.clone());
    assert!(matches!(cmd_train_contrastive(&wrong_dim), Err(RunError::Config(_))));
    assert!(!tmp.path().join("dim").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    assert_eq!(SweepParam::Tau.default_values(), vec![0.05, 0.1, 0.5, 1.0]);
    assert_eq!(
        SweepParam::Dim.default_values(),
        vec![64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0]
    );

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_synth(&small_synth(80, 0.1, 8), &data).unwrap();
    let mut template = small_config(Stage::Contrastive, &data, tmp.path().join("sweep"));
    template.epochs = 2;
    let mut base_stage = small_config(Stage::Base, &data, tmp.path().join("unused"));
    base_stage.epochs = 2;
    let mut sweep = SweepConfig::new(SweepParam::Dim, template, base_stage);
    sweep.values = vec![4.0, 8.0, 16.0];
    sweep.parallel = true;
    let out = cmd_sweep(&sweep).unwrap();
    assert_eq!(out.rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![4.0, 8.0, 16.0]);
    for v in ["dim=4", "dim=8", "dim=16"] {
        assert!(out.table.contains(v), "{}", out.table);
        assert!(tmp
            .path()
            .join("sweep")
            .join(format!("dim_{}", &v[4..]))
            .join(CHECKPOINT_FILE)
            .exists());
    }
    assert!(tmp.path().join("sweep/base").join(CHECKPOINT_FILE).exists());
    assert_eq!(
        fs::read_to_string(tmp.path().join("sweep/sweep.txt")).unwrap(),
        out.table
    );

    let mut bad = sweep.clone();
    bad.values = vec![0.5];
    assert!(matches!(cmd_sweep(&bad), Err(RunError::Config(_))));
}

#[test]
fn generated_and_loaded_datasets_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synth(50, 0.1, 9);
    let paths = cmd_gen_synth(&cfg, tmp.path()).unwrap();
    assert_eq!(PairedDataset::load(&paths).unwrap(), synth_generate(&cfg).unwrap());
}
