use std::io::Write;
use std::path::{Path, PathBuf};

use fluent_slt::audio::{apply_cmvn, compute_fbank, read_wav, speaker_cmvn, FeatureMatrix};
use fluent_slt::data::{
    build_vocab, featurize_synthetic, filter_long, make_synthetic_corpus, read_lines, read_manifest, write_lines,
    write_manifest, ManifestRow, TargetSide, Utterance,
};
use fluent_slt::decode::{translate, translate_greedy, DecodeConfig};
use fluent_slt::metrics::{bleu_corpus, single_ref_average, write_diff_report, Metric};
use fluent_slt::model::{EncoderKind, Seq2Seq, Source};
use fluent_slt::postprocess::{filter_disfluencies, monomt_postedit, FillerLexicon, FilterConfig};
use fluent_slt::train::{speech_dev, speech_examples, text_dev, text_examples, train_to_dir, Trainer};
use fluent_slt::{Error, Result};

use crate::config::RunConfig;
use crate::Command;

pub fn execute(command: Command, mut config: RunConfig) -> Result<()> {
    match command {
        Command::SynthData { out_dir } => synth_data(&config, &out_dir),
        Command::Featurize {
            manifest,
            out,
            feat_dir,
        } => featurize(&config, &manifest, &out, feat_dir),
        Command::Train {
            train,
            dev,
            out_dir,
            resume,
        } => train_cmd(&config, &train, &dev, &out_dir, resume.as_deref()),
        Command::Translate {
            model,
            manifest,
            out,
            beam,
            lennorm,
            greedy,
        } => {
            if let Some(b) = beam {
                config.set("decode.beam_size", b.to_string())?;
            }
            if let Some(l) = lennorm {
                config.set("decode.length_norm_exponent", l.to_string())?;
            }
            translate_cmd(&config, &model, &manifest, out.as_deref(), greedy)
        }
        Command::Filter {
            input,
            out,
            lexicon,
            max_ngram,
        } => filter_cmd(&input, out.as_deref(), lexicon.as_deref(), max_ngram),
        Command::Postedit { model, input, out, beam } => {
            if let Some(b) = beam {
                config.set("decode.beam_size", b.to_string())?;
            }
            postedit_cmd(&config, &model, &input, out.as_deref())
        }
        Command::Score {
            hyp,
            refs,
            metric,
            no_bp,
            single_ref_average,
            json,
        } => {
            if let Some(m) = metric {
                config.set("metrics.metric", m)?;
            }
            if no_bp {
                config.set("metrics.use_bp", "false")?;
            }
            score_cmd(&config, &hyp, &refs, single_ref_average, json)
        }
        Command::DiffReport { a, b, out } => {
            let txt = write_diff_report(&read_lines(&a)?, &read_lines(&b)?, &out)?;
            eprintln!("wrote {} and {}", out.display(), txt.display());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, lines: &[String]) -> Result<()> {
    match out {
        Some(path) => write_lines(path, lines),
        None => {
            let mut stdout = std::io::stdout().lock();
            for l in lines {
                writeln!(stdout, "{l}").map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })?;
            }
            Ok(())
        }
    }
}

fn write_features(utts: &[Utterance], feat_dir: &Path, stored_prefix: &str) -> Result<Vec<Option<String>>> {
    create_dir(feat_dir)?;
    utts.iter()
        .map(|u| {
            let name = format!("{}.feat", u.id);
            let f = u
                .features
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no features", u.id)))?;
            f.write(&feat_dir.join(&name))?;
            Ok(Some(format!("{stored_prefix}{name}")))
        })
        .collect()
}

fn synth_data(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let data = config.data()?;
    let frontend = config.frontend()?;
    let size = config.usize("data.size")?;
    let dev = config.usize("data.dev_size")?;
    let test = config.usize("data.test_size")?;
    if dev + test >= size {
        return Err(Error::Config(format!(
            "data.size {size} leaves no training utterances after {dev} dev and {test} test"
        )));
    }
    let mut utts = make_synthetic_corpus(&data, size)?;
    featurize_synthetic(&mut utts, &frontend, data.seed)?;
    let utts = filter_long(utts, &data)?;
    create_dir(out_dir)?;
    let paths = write_features(&utts, &out_dir.join("feats"), "feats/")?;
    let n_train = utts.len().saturating_sub(dev + test);
    let splits = [("train.tsv", 0, n_train), ("dev.tsv", n_train, n_train + dev), ("test.tsv", n_train + dev, utts.len())];
    for (name, lo, hi) in splits {
        write_manifest(&out_dir.join(name), &utts[lo..hi], &paths[lo..hi])?;
        eprintln!("{name}: {} utterances", hi - lo);
    }
    Ok(())
}

fn featurize(config: &RunConfig, manifest: &Path, out: &Path, feat_dir: Option<PathBuf>) -> Result<()> {
    let frontend = config.frontend()?;
    let data = config.data()?;
    let rows = read_manifest(manifest)?;
    let mut raw = Vec::with_capacity(rows.len());
    for row in &rows {
        let wav = row
            .feature_path
            .as_ref()
            .ok_or_else(|| Error::Format {
                path: manifest.to_path_buf(),
                reason: format!("utterance {} has no audio path", row.id),
            })?;
        let (samples, rate) = read_wav(wav)?;
        if rate != frontend.sample_rate_hz {
            return Err(Error::InvalidInput(format!(
                "{}: sample rate {rate} Hz, expected {} Hz",
                wav.display(),
                frontend.sample_rate_hz
            )));
        }
        raw.push(compute_fbank(&samples, &frontend)?);
    }
    let stats = speaker_cmvn(rows.iter().map(|r| r.speaker_id.as_str()).zip(&raw))?;
    let utts: Vec<Utterance> = rows
        .into_iter()
        .zip(raw)
        .map(|(row, f): (ManifestRow, FeatureMatrix)| {
            let normalized = apply_cmvn(&f, &stats[&row.speaker_id])?;
            Ok(row.into_utterance(Some(normalized)))
        })
        .collect::<Result<_>>()?;
    let before = utts.len();
    let utts = filter_long(utts, &data)?;
    let base = out.parent().unwrap_or_else(|| Path::new(""));
    let (dir, prefix) = match feat_dir {
        Some(d) => {
            create_dir(&d)?;
            let abs = d.canonicalize().map_err(|e| Error::Io { path: d.clone(), source: e })?;
            let prefix = format!("{}/", abs.display());
            (abs, prefix)
        }
        None => (base.join("feats"), "feats/".to_string()),
    };
    let paths = write_features(&utts, &dir, &prefix)?;
    write_manifest(out, &utts, &paths)?;
    eprintln!("featurized {} utterances, dropped {} over {} frames", utts.len(), before - utts.len(), data.max_frames);
    Ok(())
}

fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    read_manifest(manifest)?.into_iter().map(ManifestRow::load_utterance).collect()
}

fn text_pairs(utts: &[Utterance], side: TargetSide) -> Result<Vec<(String, String)>> {
    utts.iter()
        .map(|u| {
            let t = u
                .target(side)
                .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no {side:?} reference", u.id)))?;
            Ok((u.source_text.clone(), t.to_string()))
        })
        .collect()
}

fn train_cmd(config: &RunConfig, train: &Path, dev: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    let train_config = config.train()?;
    let side = config.target()?;
    let train_utts = load_utterances(train)?;
    let dev_utts = load_utterances(dev)?;
    let mut trainer = match resume {
        Some(path) => Trainer::load(path, train_config)?,
        None => {
            let model_config = config.model()?;
            let targets: Vec<&str> = train_utts
                .iter()
                .flat_map(|u| u.disfluent_refs.iter().chain(&u.fluent_refs))
                .map(String::as_str)
                .collect();
            let vocab = build_vocab(&targets)?;
            let source_vocab = match model_config.encoder {
                EncoderKind::Speech(_) => None,
                EncoderKind::Text(_) => {
                    let sources: Vec<&str> = train_utts.iter().map(|u| u.source_text.as_str()).collect();
                    Some(build_vocab(&sources)?)
                }
            };
            let seed = train_config.seed;
            Trainer::new(Seq2Seq::new(model_config, vocab, source_vocab, seed)?, train_config)?
        }
    };
    let (examples, dev_items) = match trainer.model.config.encoder {
        EncoderKind::Speech(_) => (
            speech_examples(&train_utts, &trainer.model.target_vocab, side)?,
            speech_dev(&dev_utts, side)?,
        ),
        EncoderKind::Text(_) => (
            text_examples(&trainer.model, &text_pairs(&train_utts, side)?)?,
            text_dev(&trainer.model, &text_pairs(&dev_utts, side)?)?,
        ),
    };
    create_dir(out_dir)?;
    let effective: Vec<String> = config.effective().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    write_lines(&out_dir.join("config.txt"), &effective)?;
    let files = train_to_dir(&mut trainer, &examples, &dev_items, out_dir)?;
    eprintln!(
        "trained {} epochs; best checkpoint {}, log {}",
        trainer.state.epoch,
        files.best.display(),
        files.log.display()
    );
    Ok(())
}

fn decode_all(model: &Seq2Seq<f32>, sources: Vec<Source<f32>>, decode: &DecodeConfig, greedy: bool) -> Result<Vec<String>> {
    sources
        .iter()
        .map(|s| {
            if greedy {
                translate_greedy(model, s, decode)
            } else {
                translate(model, s, decode)
            }
        })
        .collect()
}

fn translate_cmd(config: &RunConfig, model: &Path, manifest: &Path, out: Option<&Path>, greedy: bool) -> Result<()> {
    let decode = config.decode()?;
    let model = Seq2Seq::<f32>::load(model)?;
    let utts = load_utterances(manifest)?;
    let sources = utts
        .iter()
        .map(|u| match model.config.encoder {
            EncoderKind::Speech(_) => u
                .features
                .as_ref()
                .map(|f| Source::Features(f.to_tensor()))
                .ok_or_else(|| Error::InvalidInput(format!("utterance {} has no features", u.id))),
            EncoderKind::Text(_) => model.source_tokens(&u.source_text).map(Source::Tokens),
        })
        .collect::<Result<Vec<_>>>()?;
    emit(out, &decode_all(&model, sources, &decode, greedy)?)
}

fn filter_cmd(input: &Path, out: Option<&Path>, lexicon: Option<&Path>, max_ngram: usize) -> Result<()> {
    let config = FilterConfig {
        lexicon: match lexicon {
            Some(p) => FillerLexicon::load(p)?,
            None => FillerLexicon::default_lexicon(),
        },
        max_repetition_ngram: max_ngram,
    };
    let lines = read_lines(input)?
        .iter()
        .map(|l| filter_disfluencies(l, &config))
        .collect::<Result<Vec<_>>>()?;
    emit(out, &lines)
}

fn postedit_cmd(config: &RunConfig, model: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let decode = config.decode()?;
    let model = Seq2Seq::<f32>::load(model)?;
    if !matches!(model.config.encoder, EncoderKind::Text(_)) {
        return Err(Error::Config("postedit needs a monomt checkpoint".into()));
    }
    let lines = read_lines(input)?
        .iter()
        .map(|l| monomt_postedit(l, &model, &decode))
        .collect::<Result<Vec<_>>>()?;
    emit(out, &lines)
}

fn score_cmd(config: &RunConfig, hyp: &Path, ref_paths: &[PathBuf], single: bool, json: bool) -> Result<()> {
    let metric = config.metric()?;
    let hyps = read_lines(hyp)?;
    let columns = ref_paths.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
    for (p, col) in ref_paths.iter().zip(&columns) {
        if col.len() != hyps.len() {
            return Err(Error::InvalidInput(format!(
                "{} has {} lines, hypotheses have {}",
                p.display(),
                col.len(),
                hyps.len()
            )));
        }
    }
    let refs: Vec<Vec<String>> = (0..hyps.len()).map(|i| columns.iter().map(|c| c[i].clone()).collect()).collect();
    let name = match &metric {
        Metric::Bleu { .. } => "bleu",
        Metric::Meteor(_) => "meteor",
    };
    if single {
        let score = single_ref_average(&hyps, &refs, &metric)?;
        if json {
            let v = serde_json::json!({ "metric": name, "single_ref_average": true, "score": score });
            println!("{v}");
        } else {
            println!("{} (single-reference average) = {score:.4}", name.to_uppercase());
        }
        return Ok(());
    }
    match metric {
        Metric::Bleu { use_bp } => {
            let s = bleu_corpus(&hyps, &refs, use_bp)?;
            if json {
                let v = serde_json::json!({
                    "metric": "bleu",
                    "score": s.score,
                    "precisions": s.precisions,
                    "brevity_penalty": s.brevity_penalty,
                    "use_bp": use_bp,
                    "hyp_len": s.hyp_len,
                    "ref_len": s.ref_len,
                    "references": ref_paths.len(),
                });
                println!("{v}");
            } else {
                let p: Vec<String> = s.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
                println!("BLEU = {:.2}, {}", s.score, p.join("/"));
                println!(
                    "BP = {:.4}{}, ratio = {:.4}, c = {}, r = {}",
                    s.brevity_penalty,
                    if use_bp { "" } else { " (not applied)" },
                    s.hyp_len as f64 / s.ref_len.max(1) as f64,
                    s.hyp_len,
                    s.ref_len
                );
            }
        }
        Metric::Meteor(_) => {
            let score = metric.corpus(&hyps, &refs)?;
            if json {
                println!("{}", serde_json::json!({ "metric": "meteor", "score": score }));
            } else {
                println!("METEOR = {score:.4}");
            }
        }
    }
    Ok(())
}
