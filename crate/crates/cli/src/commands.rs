use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use pinsite::augment::expand_training_set;
use pinsite::blocks::{count_actual_params, ParamFormula};
use pinsite::data::{generate_synthetic, load_dataset, prepare_sized, split_dataset, write_split_manifest, LoadReport};
use pinsite::explain::{grad_cam, render_overlay};
use pinsite::image::Image;
use pinsite::metrics::{roc_auc, roc_csv};
use pinsite::model::{load_checkpoint, save_checkpoint, BlockMode, ModelConfig, PinSiteNet};
use pinsite::nn::Mode;
use pinsite::train::{evaluate, train_loop};
use pinsite::{Error, Label, Result};

use crate::config::RunConfig;

fn load_reporting(root: &Path) -> Result<LoadReport> {
    let report = load_dataset(root)?;
    for (path, reason) in &report.failures {
        eprintln!("warning: skipped {}: {reason}", path.display());
    }
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn synth(n: usize, seed: u64, out: &Path) -> Result<()> {
    let rows = generate_synthetic(n, seed, out)?;
    println!("wrote {} images and manifest.csv to {}", rows.len(), out.display());
    Ok(())
}

pub fn augment(input: &Path, out: &Path, seed: u64) -> Result<()> {
    let report = load_reporting(input)?;
    let expanded = expand_training_set(&report.items, seed);
    for label in Label::ALL {
        fs::create_dir_all(out.join(label.dir_name()))?;
    }
    for item in &expanded {
        item.image.write(&out.join(item.label.dir_name()).join(format!("{}.png", item.id)))?;
    }
    println!(
        "expanded {} images to {} in {}",
        report.items.len(),
        expanded.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let report = load_reporting(&cfg.data_root)?;
    println!(
        "loaded {} images (GroupA {}, GroupB {})",
        report.items.len(),
        report.count(Label::GroupA),
        report.count(Label::GroupB)
    );
    let split = split_dataset(report.items, cfg.seed)?;
    let train_set = split.train.augment(cfg.seed);
    println!(
        "split: train {} (augmented {}), val {}, test {}",
        split.train.len(),
        train_set.len(),
        split.val.len(),
        split.test.len()
    );
    fs::create_dir_all(&cfg.out_dir)?;
    write_split_manifest(&split, &cfg.out_dir.join("split.csv"))?;

    let net = PinSiteNet::new(cfg.model.clone())?;
    let start = Instant::now();
    let (mut net, report) = train_loop(net, &train_set, &split.val, &cfg.train, &mut |r| {
        println!(
            "epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}  f1 {:.4}  auc {:.4}  ({:.0}s)",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            r.f1,
            r.auc,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("stopped: {}, best epoch {}", report.stop_reason, report.best_epoch);

    let ckpt = cfg.out_dir.join("model.psw");
    save_checkpoint(&net, &ckpt)?;
    println!("wrote {}", ckpt.display());
    write(&cfg.out_dir.join("train_report.csv"), &report.to_csv())?;
    if !split.test.is_empty() {
        let test = evaluate(&mut net, &split.test, &cfg.train.loss, cfg.train.threshold, cfg.train.batch_size)?;
        print!("test set:\n{}", test.report.to_table());
        write(&cfg.out_dir.join("test_metrics.csv"), &test.report.to_csv())?;
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn eval(checkpoint: &Path, data: &Path, threshold: f64, out: &Path, warmup: usize, runs: usize) -> Result<()> {
    let mut net = load_checkpoint(checkpoint)?;
    let items = load_reporting(data)?.items;
    let batch = 16;
    let ev = evaluate(&mut net, &items, &pinsite::loss::LossKind::CrossEntropy, threshold, batch)?;
    let cm = ev.report.confusion;
    println!("{} images, threshold {threshold}", items.len());
    print!("{}", ev.report.to_table());
    println!("confusion (positive = GroupA)");
    println!("              pred A  pred B");
    println!("  true A  {:>8} {:>7}", cm.tp, cm.fn_);
    println!("  true B  {:>8} {:>7}", cm.fp, cm.tn);

    fs::create_dir_all(out)?;
    write(&out.join("metrics.csv"), &ev.report.to_csv())?;
    let truths: Vec<Label> = items.iter().map(|i| i.label).collect();
    let scores: Vec<f64> = ev.predictions.iter().map(|p| p.probs[0]).collect();
    match roc_auc(&scores, &truths) {
        Ok(curve) => write(&out.join("roc.csv"), &roc_csv(&curve))?,
        Err(e) => eprintln!("warning: no ROC curve: {e}"),
    }

    if runs > 0 {
        let x = pinsite::data::prepare_batch([&items[0].image], net.config().input_size)?;
        for _ in 0..warmup {
            net.predict(x.clone(), threshold)?;
        }
        let mut ms = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            net.predict(x.clone(), threshold)?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let (mean, std) = mean_std(&ms);
        println!("inference: {mean:.3} ± {std:.3} ms per image ({runs} runs after {warmup} warm-up)");
    }
    Ok(())
}

fn load_image(net: &PinSiteNet<f32>, path: &Path) -> Result<(Image, pinsite::tensor::Tensor<f32>)> {
    let image = Image::read(path)?;
    let size = net.config().input_size;
    let x = prepare_sized(&image, size)?.reshape(&[1, 3, size, size])?;
    Ok((image, x))
}

pub fn predict(checkpoint: &Path, image: &Path, threshold: f64) -> Result<()> {
    let mut net = load_checkpoint(checkpoint)?;
    let (_, x) = load_image(&net, image)?;
    let p = net.predict(x, threshold)?.remove(0);
    println!("label: {}", p.label);
    println!("p_groupA: {:.6}", p.probs[0]);
    println!("p_groupB: {:.6}", p.probs[1]);
    Ok(())
}

pub fn explain(checkpoint: &Path, image: &Path, class: Option<Label>, layer: &str, out: &Path, alpha: f64) -> Result<()> {
    let mut net = load_checkpoint(checkpoint)?;
    let (img, x) = load_image(&net, image)?;
    let class = match class {
        Some(c) => c,
        None => net.predict(x.clone(), 0.5)?[0].label,
    };
    let heat = grad_cam(&mut net, &x, class.index(), layer)?;
    let overlay = render_overlay(&img, &heat, alpha)?;
    let id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("cannot derive an id from {}", image.display())))?;
    fs::create_dir_all(out)?;
    let png = out.join(format!("{id}_cam.png"));
    overlay.write(&png)?;
    println!("wrote {}", png.display());
    write(&out.join(format!("{id}_cam.csv")), &heat.to_csv())?;
    if heat.degenerate {
        eprintln!("warning: Grad-CAM map for {class} at {layer} is identically zero");
    }
    Ok(())
}

pub fn audit_params(model: &ModelConfig) -> Result<()> {
    let net = PinSiteNet::<f32>::new(model.clone())?;
    let table = count_actual_params(&net);
    println!("{table}\n");

    let conv = ParamFormula::Conv { k: 3, c_in: 128, c_out: 256 }.evaluate()?;
    let errc = ParamFormula::Errc { c_in: 128, c_out: 256 }.evaluate()?;
    let ir = ParamFormula::InvertedResidual { k: 3, a: 3, c_in: 128, c_out: 256 }.evaluate()?;
    let mut out = String::new();
    let _ = writeln!(out, "block formulas at k=3, C_in=128, C_out=256");
    let _ = writeln!(out, "  standard conv          {conv:>10}");
    let _ = writeln!(out, "  ERRC                   {errc:>10}");
    let _ = writeln!(out, "  inverted residual a=3  {ir:>10}");
    let _ = writeln!(out, "  conv / ERRC            {:>10.3}", conv as f64 / errc as f64);
    let _ = writeln!(out, "  inv. residual / ERRC   {:>10.3}", ir as f64 / errc as f64);
    if model.block_mode == BlockMode::Errc {
        let _ = writeln!(out, "\nERRC blocks in this model (formula vs counted weights)");
        for (i, stage) in model.stages.iter().enumerate() {
            let c = stage.errc_channels as u64;
            let name = format!("stage{}.errc", i + 1);
            let formula = ParamFormula::Errc { c_in: c, c_out: c }.evaluate()?;
            let actual = table.subtotal(&format!("{name}."));
            let _ = writeln!(out, "  {name:<12} {c:>4}→{c:<4} {formula:>10} {actual:>10}");
        }
    }
    print!("{out}");
    Ok(())
}

pub fn export_embeddings(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut net = load_checkpoint(checkpoint)?;
    net.set_mode(Mode::Infer);
    let items = load_reporting(data)?.items;
    let size = net.config().input_size;
    let hidden = net.config().head.hidden_units;
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((1..=hidden).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for chunk in items.chunks(16) {
        let x = pinsite::data::prepare_batch(chunk.iter().map(|i| &i.image), size)?;
        let emb = net.extract_embedding(x)?;
        for (item, row) in chunk.iter().zip(emb.data().chunks(hidden)) {
            let mut rec = vec![item.id.clone(), item.label.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    println!("wrote {} embeddings to {}", items.len(), out.display());
    Ok(())
}
