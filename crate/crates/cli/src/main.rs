//! `nnwm`: embed, extract and verify structural watermarks in CNN models
//! stored as a JSON architecture manifest plus a binary weight blob.
//!
//! Exit codes: 0 success (or watermark match), 1 watermark mismatch,
//! 2 usage or runtime error.

mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::Parser;
use nnwm_core::attack::{attack_finetune, attack_noise, attack_structural, attack_zero_weights};
use nnwm_core::codec::{self, bits_to_string, capacity, covered_layers, EmbedParams, WatermarkPayload};
use nnwm_core::fixtures;
use nnwm_core::keystream::KeyStream;
use nnwm_core::pipeline::{eligible_layers, embed_with, extract, verify, EmbedOptions, Extraction, Reference};
use nnwm_core::pruner::Receipt;
use nnwm_core::train::{accuracy, finetune, history_csv, synth_dataset, TrainConfig};
use nnwm_core::{load_model, save_model, ModelGraph, Verdict};
use serde_json::json;

use args::{
    AttackArgs, AttackKind, CapacityArgs, Cli, Command, EmbedArgs, ExtractArgs, FixtureArgs, FixtureName,
    InspectArgs, KeyArgs, ModelArgs, OptionalKeyArgs, ReferenceArgs, SchemeArgs, SuspectArgs, TrainDemoArgs, VerifyArgs,
};

const SYNTH_TRAIN: usize = 256;
const SYNTH_TEST: usize = 200;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let json = cli.json;
    match cli.command {
        Command::Embed(a) => cmd_embed(a, json),
        Command::Extract(a) => cmd_extract(a, json),
        Command::Verify(a) => cmd_verify(a, json),
        Command::Capacity(a) => cmd_capacity(a, json),
        Command::Inspect(a) => cmd_inspect(a, json),
        Command::Attack(a) => cmd_attack(a, json),
        Command::TrainDemo(a) => cmd_train_demo(a, json),
        Command::Fixture(a) => cmd_fixture(a, json),
    }
}

impl KeyArgs {
    fn bytes(&self) -> Result<Vec<u8>> {
        match (&self.key, &self.key_hex) {
            (Some(k), None) => Ok(k.as_bytes().to_vec()),
            (None, Some(h)) => hex::decode(h.trim()).context("--key-hex is not valid hex"),
            _ => bail!("exactly one of --key or --key-hex is required"),
        }
    }
}

impl OptionalKeyArgs {
    fn bytes(&self) -> Result<Option<Vec<u8>>> {
        Ok(match (&self.key, &self.key_hex) {
            (None, None) => None,
            (key, key_hex) => Some(KeyArgs { key: key.clone(), key_hex: key_hex.clone() }.bytes()?),
        })
    }
}

impl SchemeArgs {
    fn params(&self, key: Vec<u8>) -> Result<EmbedParams> {
        let mut p = EmbedParams::new(self.pmin, self.pmax, self.l, key)?;
        if let Some(r) = self.r_cov {
            p = p.with_r_cov(r)?;
        }
        Ok(p)
    }
}

fn weights_path(arch: &Path, weights: &Option<PathBuf>) -> PathBuf {
    weights.clone().unwrap_or_else(|| arch.with_extension("bin"))
}

fn load_pair(arch: &Path, weights: &Option<PathBuf>) -> Result<ModelGraph> {
    let w = weights_path(arch, weights);
    load_model(arch, &w).with_context(|| format!("loading {} / {}", arch.display(), w.display()))
}

impl ModelArgs {
    fn load(&self) -> Result<ModelGraph> {
        load_pair(&self.arch, &self.weights)
    }
}

impl SuspectArgs {
    fn load(&self) -> Result<ModelGraph> {
        load_pair(&self.arch, &self.weights)
    }
}

fn save_prefix(model: &ModelGraph, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let arch = prefix.with_extension("json");
    let weights = prefix.with_extension("bin");
    save_model(model, &arch, &weights).with_context(|| format!("writing {}", arch.display()))?;
    Ok((arch, weights))
}

/// Binary string, `0x` hex, or `@path` (raw file bytes, MSB first).
fn parse_payload(text: &str) -> Result<Vec<bool>> {
    if let Some(path) = text.strip_prefix('@') {
        let bytes = fs::read(path).with_context(|| format!("reading payload file {path}"))?;
        ensure!(!bytes.is_empty(), "payload file {path} is empty");
        return Ok(codec::bytes_to_bits(&bytes));
    }
    Ok(codec::parse_bits(text)?)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn cmd_embed(a: EmbedArgs, json: bool) -> Result<ExitCode> {
    let model = a.model.load()?;
    let params = a.scheme.params(a.key.bytes()?)?;
    let bits = parse_payload(&a.payload)?;
    if let Some(r) = params.r_cov {
        let cap = capacity(model.channel_counts().len(), params.segment_length, r);
        ensure!(bits.len() <= cap, "payload of {} bits exceeds capacity {cap} at r_cov = {r}", bits.len());
    }
    let payload = WatermarkPayload::new(bits, params.segment_length)?;
    let marked = embed_with(&model, &payload, &params, a.scheme.criterion, EmbedOptions { decoy: a.decoy })?;
    let mut out = marked.model;
    let mut history = Vec::new();
    if a.finetune_epochs > 0 {
        let data = synth_dataset(a.seed, SYNTH_TRAIN, SYNTH_TEST);
        let cfg = TrainConfig { epochs: a.finetune_epochs, lr: a.lr, seed: a.seed, ..TrainConfig::default() };
        let (tuned, h) = finetune(&out, &data, &cfg).context("fine-tuning the marked model")?;
        out = tuned;
        history = h;
    }
    let (arch, weights) = save_prefix(&out, &a.out_prefix)?;
    let receipt_path = a.receipt.unwrap_or_else(|| a.out_prefix.with_extension("receipt.json"));
    fs::write(&receipt_path, marked.receipt.to_json()).with_context(|| format!("writing {}", receipt_path.display()))?;

    let capacity_bits = match params.r_cov {
        Some(r) => capacity(model.channel_counts().len(), params.segment_length, r)
            .min(marked.eligibility.eligible.len() * params.segment_length as usize),
        None => marked.eligibility.eligible.len() * params.segment_length as usize,
    };
    if json {
        print_json(&json!({
            "arch": arch, "weights": weights, "receipt": receipt_path,
            "payload_bits": payload.len(),
            "segments": marked.receipt.layers.len(),
            "capacity_bits": capacity_bits,
            "marked_layers": marked.receipt.layers,
            "parameters": { "before": model.parameter_count(), "after": out.parameter_count() },
            "finetune": history,
        }));
    } else {
        println!("embedded {} bits as m = {} segments of l = {} ({} eligible conv layers, {} excluded)",
            payload.len(), marked.receipt.layers.len(), params.segment_length, marked.eligibility.eligible.len(), marked.eligibility.excluded.len());
        println!("capacity N = {capacity_bits} bits");
        for l in &marked.receipt.layers {
            println!("  conv {:>3}: {:>4} -> {:>4} channels (target {:.4}, realized {:.4})", l.index, l.c, l.c_pruned, l.target_rate, l.realized_rate);
        }
        println!("parameters: {} -> {}", model.parameter_count(), out.parameter_count());
        if let Some(last) = history.last() {
            println!("fine-tuned {} epochs: test accuracy {:.2}%", last.epoch, last.test_accuracy * 100.0);
        }
        println!("wrote {}, {}, {}", arch.display(), weights.display(), receipt_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

enum LoadedReference {
    Model(ModelGraph),
    Receipt(Receipt),
}

impl LoadedReference {
    fn load(r: &ReferenceArgs) -> Result<Self> {
        match (&r.reference_arch, &r.receipt) {
            (Some(arch), None) => {
                let w = weights_path(arch, &r.reference_weights);
                Ok(Self::Model(load_model(arch, &w).with_context(|| format!("loading reference {}", arch.display()))?))
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(Self::Receipt(Receipt::from_json(&text)?))
            }
            _ => bail!("exactly one of --reference-arch or --receipt is required"),
        }
    }

    fn as_ref(&self) -> Reference<'_> {
        match self {
            Self::Model(m) => Reference::Model(m),
            Self::Receipt(r) => Reference::Receipt(r),
        }
    }
}

fn run_extract(a: &ExtractArgs) -> Result<(Extraction, EmbedParams)> {
    let suspect = a.suspect.load()?;
    let params = a.scheme.params(a.key.bytes()?)?;
    let reference = LoadedReference::load(&a.reference)?;
    let n = match (&reference, a.n) {
        (_, Some(n)) => n,
        (LoadedReference::Receipt(r), None) => r.payload_bits,
        (LoadedReference::Model(_), None) => bail!("--n is required when extracting against a reference model"),
    };
    let extraction = extract(reference.as_ref(), &suspect, &params, n, a.scheme.criterion)?;
    for w in extraction.warnings() {
        eprintln!(
            "warning: conv {} observed rate {:.4} outside [{}, {}); clamped to segment {}",
            w.index, w.p_hat, params.p_min, params.p_max, w.segment
        );
    }
    Ok((extraction, params))
}

fn print_readings(ex: &Extraction) {
    println!("{:>5} {:>6} {:>6} {:>8} {:>7}", "conv", "c", "c'", "p_hat", "segment");
    for l in &ex.layers {
        println!("{:>5} {:>6} {:>6} {:>8.4} {:>7}{}", l.index, l.c, l.c_suspect, l.p_hat, l.segment, if l.in_range { "" } else { "  (clamped)" });
    }
}

fn cmd_extract(a: ExtractArgs, json: bool) -> Result<ExitCode> {
    let (ex, _) = run_extract(&a)?;
    if json {
        print_json(&json!({ "bits": bits_to_string(&ex.bits), "layers": ex.layers }));
    } else {
        print_readings(&ex);
        println!("{}", bits_to_string(&ex.bits));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs, json: bool) -> Result<ExitCode> {
    let expected = parse_payload(&a.expect)?;
    let mut extract_args = a.extract;
    extract_args.n.get_or_insert(expected.len());
    let (ex, _) = run_extract(&extract_args)?;
    let mut report = verify(&expected, &ex.bits, a.theta)?;
    report.layers = ex.layers;
    if json {
        print_json(&serde_json::to_value(&report)?);
    } else {
        println!("expected  {}", report.expected);
        println!("extracted {}", report.extracted);
        println!("bit errors {} / {}, BER {:.4}, threshold {}", report.bit_errors, expected.len(), report.ber, report.threshold);
        println!("{}", match report.verdict {
            Verdict::Match => "MATCH",
            Verdict::Mismatch => "MISMATCH",
        });
    }
    Ok(match report.verdict {
        Verdict::Match => ExitCode::SUCCESS,
        Verdict::Mismatch => ExitCode::from(1),
    })
}

fn cmd_capacity(a: CapacityArgs, json: bool) -> Result<ExitCode> {
    ensure!(a.r_cov > 0.0 && a.r_cov <= 1.0, "--r-cov must be in (0, 1]");
    let (t, eligible) = match (&a.t, &a.model) {
        (Some(t), None) => (*t, None),
        (None, Some(arch)) => {
            let model = load_model(arch, weights_path(arch, &a.weights))?;
            let params = EmbedParams::with_defaults(a.l, Vec::new())?;
            let e = eligible_layers(&model, &params, a.criterion);
            (model.channel_counts().len(), Some(e))
        }
        _ => bail!("exactly one of --t or --arch is required"),
    };
    let n = capacity(t, a.l, a.r_cov);
    let m = covered_layers(t, a.r_cov);
    if json {
        print_json(&json!({
            "t": t, "l": a.l, "r_cov": a.r_cov, "covered_layers": m, "capacity_bits": n,
            "eligible_layers": eligible.as_ref().map(|e| e.eligible.len()),
        }));
    } else {
        println!("{n}");
        if let Some(e) = eligible {
            eprintln!("t = {t}, covered = {m}, eligible under {} = {}", a.criterion, e.eligible.len());
            if m > e.eligible.len() {
                eprintln!("warning: only {} layers are eligible; at most {} bits can be embedded", e.eligible.len(), e.eligible.len() * a.l as usize);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(a: InspectArgs, json: bool) -> Result<ExitCode> {
    let suspect = a.suspect.load()?;
    let counts = suspect.channel_counts();
    let params = EmbedParams::new(a.pmin, a.pmax, a.l, Vec::new())?;
    let no_reference = a.reference.reference_arch.is_none() && a.reference.receipt.is_none();
    let (reference_counts, indices): (Vec<usize>, Vec<usize>) = if no_reference {
        (counts.clone(), (0..counts.len()).collect())
    } else {
        match LoadedReference::load(&a.reference)? {
            LoadedReference::Model(m) => (m.channel_counts(), (0..m.channel_counts().len()).collect()),
            LoadedReference::Receipt(r) => {
                let mut rc = counts.clone();
                for l in &r.layers {
                    ensure!(l.index < rc.len(), "receipt layer {} beyond the suspect's {} conv layers", l.index, rc.len());
                    rc[l.index] = l.c;
                }
                (rc, r.layers.iter().map(|l| l.index).collect())
            }
        }
    };
    ensure!(reference_counts.len() == counts.len(), "reference has {} conv layers, suspect has {}", reference_counts.len(), counts.len());
    let rows: Vec<_> = indices
        .iter()
        .map(|&i| {
            let (c, c2) = (reference_counts[i], counts[i]);
            let p_hat = (c as f64 - c2 as f64) / c as f64;
            let (d, in_range) = codec::decode_rate_clamped(p_hat, &params);
            (i, c, c2, p_hat, d, in_range)
        })
        .collect();
    if json {
        let rows: Vec<_> = rows
            .iter()
            .map(|&(i, c, c2, p, d, ok)| json!({ "index": i, "c": c, "c_suspect": c2, "p_hat": p, "segment": d, "in_range": ok }))
            .collect();
        print_json(&json!({ "name": suspect.name, "parameters": suspect.parameter_count(), "layers": rows }));
    } else {
        println!("{}: {} conv layers, {} parameters", suspect.name, counts.len(), suspect.parameter_count());
        println!("{:>5} {:>6} {:>6} {:>8} {:>7}", "conv", "c", "c'", "p_hat", "d");
        for (i, c, c2, p, d, ok) in rows {
            println!("{i:>5} {c:>6} {c2:>6} {p:>8.4} {d:>7}{}", if ok { "" } else { "  (out of range)" });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_attack(a: AttackArgs, json: bool) -> Result<ExitCode> {
    let model = a.model.load()?;
    let attacked = match a.kind {
        AttackKind::Noise => attack_noise(&model, a.strength, a.seed),
        AttackKind::Zero => {
            ensure!((0.0..=1.0).contains(&a.strength), "zeroing fraction must be in [0, 1]");
            attack_zero_weights(&model, a.strength)
        }
        AttackKind::Finetune => {
            let data = synth_dataset(a.seed, SYNTH_TRAIN, SYNTH_TEST);
            let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, ..TrainConfig::default() };
            attack_finetune(&model, &data, &cfg)?
        }
        AttackKind::Structural => {
            ensure!((0.0..1.0).contains(&a.strength), "extra pruning rate must be in [0, 1)");
            attack_structural(&model, a.strength, a.seed)?
        }
    };
    let (arch, weights) = save_prefix(&attacked, &a.out_prefix)?;
    if !json {
        println!("{:?} attack applied; wrote {}, {}", a.kind, arch.display(), weights.display());
    }
    let Some(payload) = &a.verify_payload else {
        if json {
            print_json(&json!({ "arch": arch, "weights": weights }));
        }
        return Ok(ExitCode::SUCCESS);
    };
    let expected = parse_payload(payload)?;
    let key = a.key.bytes()?.context("--verify-payload needs --key or --key-hex")?;
    let params = a.scheme.params(key)?;
    let reference = LoadedReference::load(&a.reference)?;
    let ex = extract(reference.as_ref(), &attacked, &params, expected.len(), a.scheme.criterion)?;
    let report = verify(&expected, &ex.bits, a.theta)?;
    if json {
        print_json(&json!({ "arch": arch, "weights": weights, "verify": report }));
    } else {
        println!("BER {:.4} ({} / {} bits): {:?}", report.ber, report.bit_errors, expected.len(), report.verdict);
    }
    Ok(match report.verdict {
        Verdict::Match => ExitCode::SUCCESS,
        Verdict::Mismatch => ExitCode::from(1),
    })
}

fn cmd_train_demo(a: TrainDemoArgs, json: bool) -> Result<ExitCode> {
    let data = synth_dataset(a.seed, a.n_train, a.n_test);
    let base_cfg = TrainConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, ..TrainConfig::default() };
    let (base, base_hist) = finetune(&fixtures::vgg_tiny(a.seed), &data, &base_cfg)?;
    let baseline = accuracy(&base, &data.test)?;

    let params = a.scheme.params(a.key.bytes()?.unwrap_or_else(|| b"nnwm-demo".to_vec()))?;
    let r_cov = params.r_cov.unwrap_or(1.0);
    let n = capacity(base.channel_counts().len(), params.segment_length, r_cov);
    ensure!(n > 0, "r_cov {r_cov} covers no layers");
    let bits: Vec<bool> = {
        let mut s = KeyStream::new(format!("train-demo-payload-{}", a.seed).as_bytes());
        (0..n).map(|_| s.next_u64() & 1 == 1).collect()
    };
    let marked = embed_with(
        &base,
        &WatermarkPayload::new(bits.clone(), params.segment_length)?,
        &params,
        a.scheme.criterion,
        EmbedOptions::default(),
    )?;
    let pruned_acc = accuracy(&marked.model, &data.test)?;
    let ft_cfg = TrainConfig { epochs: a.finetune_epochs, lr: a.finetune_lr, seed: a.seed + 1, ..TrainConfig::default() };
    let (tuned, ft_hist) = finetune(&marked.model, &data, &ft_cfg)?;
    let final_acc = accuracy(&tuned, &data.test)?;
    let ex = extract(Reference::Model(&base), &tuned, &params, n, a.scheme.criterion)?;
    let report = verify(&bits, &ex.bits, 0.0)?;

    if let Some(path) = &a.history {
        let mut csv = history_csv(&base_hist);
        csv.push_str(history_csv(&ft_hist).split_once('\n').map_or("", |x| x.1));
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if json {
        print_json(&json!({
            "seed": a.seed, "criterion": a.scheme.criterion, "l": params.segment_length, "r_cov": r_cov,
            "payload_bits": n,
            "baseline_accuracy": baseline, "pruned_accuracy": pruned_acc, "finetuned_accuracy": final_acc,
            "accuracy_delta": final_acc - baseline,
            "parameters": { "before": base.parameter_count(), "after": tuned.parameter_count() },
            "ber": report.ber,
        }));
    } else {
        println!("baseline accuracy        {:.2}% ({} epochs)", baseline * 100.0, a.epochs);
        println!("embedded {n} bits (l = {}, r_cov = {r_cov}, {})", params.segment_length, a.scheme.criterion);
        println!("accuracy after pruning   {:.2}%", pruned_acc * 100.0);
        println!("accuracy after fine-tune {:.2}% ({} epochs)", final_acc * 100.0, a.finetune_epochs);
        println!("delta                    {:+.2} points", (final_acc - baseline) * 100.0);
        println!("parameters               {} -> {}", base.parameter_count(), tuned.parameter_count());
        println!("extraction BER           {:.4}", report.ber);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixture(a: FixtureArgs, json: bool) -> Result<ExitCode> {
    let mut model = match a.name {
        FixtureName::VggTiny => fixtures::vgg_tiny(a.seed),
        FixtureName::Vgg19Conv16 => fixtures::vgg16_conv(a.seed),
    };
    let mut acc = None;
    if a.train_epochs > 0 {
        let data = synth_dataset(a.seed, SYNTH_TRAIN, SYNTH_TEST);
        let cfg = TrainConfig { epochs: a.train_epochs, lr: a.lr, seed: a.seed, ..TrainConfig::default() };
        model = finetune(&model, &data, &cfg)?.0;
        acc = Some(accuracy(&model, &data.test)?);
    }
    let (arch, weights) = save_prefix(&model, &a.out_prefix)?;
    if json {
        print_json(&json!({ "arch": arch, "weights": weights, "conv_layers": model.channel_counts(), "test_accuracy": acc }));
    } else {
        println!("{}: conv widths {:?}", model.name, model.channel_counts());
        if let Some(acc) = acc {
            println!("trained {} epochs: test accuracy {:.2}%", a.train_epochs, acc * 100.0);
        }
        println!("wrote {}, {}", arch.display(), weights.display());
    }
    Ok(ExitCode::SUCCESS)
}
