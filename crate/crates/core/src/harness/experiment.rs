//! End-to-end pipeline: prototypes, data, federated training, inference
//! and reporting. Each stage reads and writes files under the output
//! directory so that stages can also run one at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::catalog::builtin_catalog;
use super::config::{BackendKind, ExperimentConfig};
use super::io::{
    ensure_dir, num, opt, parse_f64, parse_opt_f64, read_csv, read_features, read_matrix, read_text, write_csv,
    write_features, write_matrix, write_text,
};
use super::synth::{generate_synthetic_dataset, partition_non_iid, SyntheticData, TestSample};
use crate::adversary::{craft_evasion, select_clients, AdversaryInjector, AttackKind};
use crate::encoding::{
    build_prototype, load_descriptions, semantic_strength, synthetic_corpus, Encoder, PrototypeSet, RemoteEncoder,
    StubEncoder,
};
use crate::error::{Error, Result};
use crate::federation::{check_convergence, AttackEvent, ClientId, Federation, LocalClient, Participant, RoundReport};
use crate::inference::{assess, attribute};
use crate::metrics::{
    alignment_score, auroc, binned_curve, coefficient_of_variation, entropy_series_from_values, mean, ols_fit, std_dev,
    threshold_sweep, zero_shot_accuracy, BinnedCurve, EntropyDiagnostics, RegressionFit, ThresholdChoice,
};
use crate::projection::{project_values, FeatureVector, LocalDataset, ProjectionMatrix};
use crate::rng::keyed_rng;

pub const DATA_SOURCE_NOTE: &str = "synthetic: planted-generator telemetry, not a real traffic dataset";

/// Encoders in binding order, stub unless the remote backend is selected.
pub fn make_encoders(cfg: &ExperimentConfig) -> Result<Vec<Box<dyn Encoder>>> {
    let timeout = Duration::from_secs_f64(cfg.encoder_backend.timeout_secs);
    let env_url = std::env::var(crate::encoding::URL_ENV).ok().filter(|u| !u.is_empty());
    let remote = env_url.is_some() || cfg.encoder_backend.kind == BackendKind::Remote;
    cfg.encoders
        .iter()
        .map(|p| -> Result<Box<dyn Encoder>> {
            if !remote {
                return Ok(Box::new(StubEncoder::new(p.clone(), cfg.seed)?));
            }
            let url = env_url
                .clone()
                .or_else(|| cfg.encoder_backend.url.clone())
                .ok_or_else(|| Error::Config("remote encoder backend needs a URL".into()))?;
            let token = std::env::var(crate::encoding::TOKEN_ENV).ok().filter(|t| !t.is_empty());
            Ok(Box::new(RemoteEncoder::new(p.encoder_id.clone(), url, token, timeout)))
        })
        .collect()
}

/// Concept ids in use, ascending.
pub fn concept_ids(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let catalog = load_catalog(cfg)?;
    let ids: Vec<String> = if cfg.concepts.include.is_empty() {
        catalog.keys().cloned().collect()
    } else {
        let mut ids = cfg.concepts.include.clone();
        ids.sort();
        ids.dedup();
        ids
    };
    for id in ids.iter().chain(&cfg.concepts.novel) {
        if !catalog.contains_key(id) || !ids.contains(id) {
            return Err(Error::Config(format!("concept {id} is not in the catalog selection")));
        }
    }
    Ok(ids)
}

fn load_catalog(cfg: &ExperimentConfig) -> Result<BTreeMap<String, Vec<crate::encoding::ConceptDescription>>> {
    match &cfg.concepts.descriptions_dir {
        Some(dir) => load_descriptions(dir),
        None => Ok(builtin_catalog()),
    }
}

pub fn build_prototypes(cfg: &ExperimentConfig) -> Result<PrototypeSet> {
    let catalog = load_catalog(cfg)?;
    let encoders = make_encoders(cfg)?;
    let refs: Vec<&dyn Encoder> = encoders.iter().map(|e| e.as_ref()).collect();
    let items = concept_ids(cfg)?
        .iter()
        .map(|id| build_prototype(id, &catalog[id], &refs, cfg.dimensions.k))
        .collect::<Result<_>>()?;
    PrototypeSet::new(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDiversity {
    pub client_id: ClientId,
    pub samples: usize,
    /// Sample-weighted mean disagreement of the client's training labels.
    pub mean_disagreement: f64,
    /// Seen-concept test accuracy of the client's last submitted matrix.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<RoundReport>,
    pub global: ProjectionMatrix,
    /// A(t) per round; empty when there are no seen test probes.
    pub alignment: Vec<f64>,
    pub client_diversity: Vec<ClientDiversity>,
    pub compromised: Vec<ClientId>,
}

/// One probe per seen concept: its first test sample.
fn probes(test: &[TestSample]) -> Vec<&FeatureVector> {
    let mut seen = BTreeSet::new();
    test.iter()
        .filter(|s| !s.is_novel)
        .filter(|s| seen.insert(s.features.label.clone()))
        .map(|s| &s.features)
        .collect()
}

fn seen_accuracy_of(w: &ProjectionMatrix, protos: &PrototypeSet, test: &[TestSample]) -> Result<Option<f64>> {
    let seen: Vec<&TestSample> = test.iter().filter(|s| !s.is_novel).collect();
    if seen.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for s in &seen {
        let z = project_values(w, &s.features.values)?;
        match attribute(&z, protos) {
            Ok((id, _)) if Some(&id) == s.features.label.as_ref() => hits += 1,
            Ok(_) | Err(Error::Abstain) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Some(hits as f64 / seen.len() as f64))
}

/// Runs the configured number of federated rounds. `on_round` sees the
/// global matrix after each aggregation.
pub fn train_federation(
    cfg: &ExperimentConfig,
    protos: &PrototypeSet,
    clients: &[LocalDataset],
    test: &[TestSample],
    mut on_round: impl FnMut(usize, &ProjectionMatrix) -> Result<()>,
) -> Result<TrainOutcome> {
    let novel: BTreeSet<&str> = cfg.concepts.novel.iter().map(String::as_str).collect();
    for c in clients {
        if let Some(s) = c
            .samples
            .iter()
            .find(|s| s.label.as_deref().is_some_and(|l| novel.contains(l)))
        {
            return Err(Error::InvalidArgument(format!(
                "client {} holds held-out concept {}",
                c.client_id,
                s.label.as_deref().unwrap_or_default()
            )));
        }
    }
    let fcfg = cfg.federation.clone();
    let participants: Vec<LocalClient> = clients.iter().map(|c| LocalClient::new(c.clone(), &fcfg)).collect();
    let refs: Vec<&dyn Participant> = participants.iter().map(|p| p as &dyn Participant).collect();
    let mut fed = Federation::new(fcfg, cfg.dimensions.k, cfg.dimensions.d)?;
    let mut injector = AdversaryInjector::new(&cfg.attacks, cfg.federation.clients)?;
    let probes = probes(test);

    let mut reports = Vec::with_capacity(cfg.federation.rounds);
    let mut alignment = Vec::new();
    for _ in 0..cfg.federation.rounds {
        let report = fed.run_round(&refs, protos, &mut injector)?;
        if !probes.is_empty() {
            let mut embeddings = Vec::new();
            let mut centroid: Vec<f64> = Vec::new();
            for (id, a) in report.alphas() {
                let upd = fed.last_updates()[id].as_ref().expect("reporting client has an update");
                let mut z = Vec::with_capacity(probes.len() * cfg.dimensions.k);
                for p in &probes {
                    z.extend(project_values(&upd.weights, &p.values)?);
                }
                if centroid.is_empty() {
                    centroid = vec![0.0; z.len()];
                }
                for (c, v) in centroid.iter_mut().zip(&z) {
                    *c += a * v;
                }
                embeddings.push(z);
            }
            alignment.push(alignment_score(&embeddings, &centroid)?);
        }
        on_round(report.t, fed.global())?;
        reports.push(report);
    }

    let mut client_diversity = Vec::new();
    for (c, upd) in clients.iter().zip(fed.last_updates()) {
        let Some(upd) = upd else { continue };
        let Some(accuracy) = seen_accuracy_of(&upd.weights, protos, test)? else {
            continue;
        };
        let total: f64 = c
            .samples
            .iter()
            .map(|s| {
                s.label
                    .as_deref()
                    .and_then(|l| protos.get(l))
                    .map_or(0.0, |p| p.disagreement)
            })
            .sum();
        client_diversity.push(ClientDiversity {
            client_id: c.client_id,
            samples: c.len(),
            mean_disagreement: total / c.len() as f64,
            accuracy,
        });
    }
    Ok(TrainOutcome {
        reports,
        global: fed.global().clone(),
        alignment,
        client_diversity,
        compromised: injector.compromised(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRow {
    pub sample_id: usize,
    /// `None` when attribution abstained.
    pub attributed_concept: Option<String>,
    pub confidence: Option<f64>,
    pub zds: Option<f64>,
    pub true_label: Option<String>,
    pub is_novel: bool,
}

/// Scores every test sample, after crafting evasion variants for any
/// configured evasion scenario.
pub fn infer_batch(
    cfg: &ExperimentConfig,
    protos: &PrototypeSet,
    global: &ProjectionMatrix,
    test: &[TestSample],
) -> Result<(Vec<AssessmentRow>, Vec<AttackEvent>)> {
    let mut samples: Vec<TestSample> = test.to_vec();
    let mut events = Vec::new();
    for scn in cfg.attacks.iter().filter(|a| a.kind == AttackKind::Evasion) {
        let target_id = scn.target.as_deref().unwrap_or_default();
        let target = protos
            .get(target_id)
            .ok_or_else(|| Error::UnknownLabel(target_id.to_owned()))?;
        let mut seen: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].is_novel).collect();
        let count = select_clients(seen.len(), scn.fraction_of_clients, scn.seed, scn.kind).len();
        seen.shuffle(&mut keyed_rng(&[&scn.seed.to_string(), "evasion"]));
        for &i in &seen[..count] {
            samples[i].features = craft_evasion(
                &samples[i].features,
                global,
                &target.fused.values,
                scn.steps,
                scn.step_size,
                scn.magnitude,
            )?;
        }
        events.push(AttackEvent {
            round: cfg.federation.rounds,
            client_id: None,
            kind: scn.kind.as_str().into(),
            magnitude: scn.magnitude,
        });
    }

    let rows = samples
        .iter()
        .map(|s| {
            let base = AssessmentRow {
                sample_id: s.sample_id,
                attributed_concept: None,
                confidence: None,
                zds: None,
                true_label: s.features.label.clone(),
                is_novel: s.is_novel,
            };
            match assess(
                &s.features,
                global,
                protos,
                cfg.inference.lambda,
                cfg.inference.disagreement_mode,
            ) {
                Ok(a) => Ok(AssessmentRow {
                    attributed_concept: Some(a.attributed_concept),
                    confidence: Some(a.confidence),
                    zds: Some(a.zds),
                    ..base
                }),
                Err(Error::Abstain) => Ok(base),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    Ok((rows, events))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub seen_accuracy: f64,
    pub novel_auroc: Option<f64>,
    pub calibration_monotone: bool,
    pub best_threshold: Option<f64>,
    pub threshold_accuracy: Option<f64>,
    pub final_entropy: f64,
    pub entropy_slope: Option<f64>,
    pub converged_round: Option<usize>,
    pub final_alignment: Option<f64>,
    pub mean_disagreement: f64,
    pub abstentions: usize,
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub headline: Headline,
    pub entropy: Option<EntropyDiagnostics>,
    pub calibration: Option<BinnedCurve>,
    pub sweep: Vec<ThresholdChoice>,
    /// (group, confidences) for correct seen, incorrect seen and novel.
    pub similarity: Vec<(&'static str, Vec<f64>)>,
}

/// Headline statistics from per-round entropies and batch assessments.
pub fn analyze(
    cfg: &ExperimentConfig,
    protos: &PrototypeSet,
    entropies: &[f64],
    deltas: &[f64],
    alignment: &[f64],
    rows: &[AssessmentRow],
) -> Result<Analysis> {
    let seen: Vec<&AssessmentRow> = rows.iter().filter(|r| !r.is_novel).collect();
    let predicted: Vec<&str> = seen
        .iter()
        .map(|r| r.attributed_concept.as_deref().unwrap_or(""))
        .collect();
    let truth: Vec<&str> = seen.iter().map(|r| r.true_label.as_deref().unwrap_or("")).collect();
    let seen_accuracy = if seen.is_empty() {
        0.0
    } else {
        zero_shot_accuracy(&predicted, &truth)?
    };

    let scored: Vec<&AssessmentRow> = rows.iter().filter(|r| r.zds.is_some()).collect();
    let scores: Vec<f64> = scored.iter().filter_map(|r| r.zds).collect();
    let flags: Vec<bool> = scored.iter().map(|r| r.is_novel).collect();
    let both = flags.iter().any(|f| *f) && flags.iter().any(|f| !*f);
    let novel_auroc = if both { Some(auroc(&scores, &flags)?) } else { None };
    let (sweep, best) = if both {
        let (s, b) = threshold_sweep(&scores, &flags)?;
        (s, Some(b))
    } else {
        (Vec::new(), None)
    };

    let mut ds = Vec::new();
    let mut cs = Vec::new();
    for r in &scored {
        let id = r.attributed_concept.as_deref().unwrap_or_default();
        let p = protos.get(id).ok_or_else(|| Error::UnknownLabel(id.to_owned()))?;
        ds.push(p.disagreement);
        cs.push(r.confidence.unwrap_or_default());
    }
    let calibration = if ds.is_empty() {
        None
    } else {
        Some(binned_curve(&ds, &cs, cfg.inference.calibration_bins)?)
    };

    let entropy = if entropies.len() >= 2 {
        Some(entropy_series_from_values(entropies)?)
    } else {
        None
    };
    let converged_round = (1..=deltas.len()).find(|&t| {
        check_convergence(
            &deltas[..t],
            cfg.federation.convergence_tolerance,
            cfg.federation.convergence_window,
        )
    });
    let converged_round = converged_round.map(|t| t - 1);

    let group = |f: &dyn Fn(&AssessmentRow) -> bool| -> Vec<f64> {
        rows.iter().filter(|r| f(r)).filter_map(|r| r.confidence).collect()
    };
    let similarity = vec![
        (
            "seen_correct",
            group(&|r| !r.is_novel && r.attributed_concept == r.true_label),
        ),
        (
            "seen_incorrect",
            group(&|r| !r.is_novel && r.attributed_concept != r.true_label),
        ),
        ("novel", group(&|r| r.is_novel)),
    ];

    let headline = Headline {
        seen_accuracy,
        novel_auroc,
        calibration_monotone: calibration.as_ref().is_some_and(|c| c.monotone_decreasing),
        best_threshold: best.map(|b| b.threshold),
        threshold_accuracy: best.map(|b| b.accuracy),
        final_entropy: entropies.last().copied().unwrap_or(f64::NAN),
        entropy_slope: entropy.as_ref().map(|e| e.fit.slope),
        converged_round,
        final_alignment: alignment.last().copied(),
        mean_disagreement: mean(&protos.iter().map(|p| p.disagreement).collect::<Vec<_>>()),
        abstentions: rows.iter().filter(|r| r.zds.is_none()).count(),
    };
    Ok(Analysis {
        headline,
        entropy,
        calibration,
        sweep,
        similarity,
    })
}

/// Everything produced by a pipeline run held in memory.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub prototypes: PrototypeSet,
    pub data: SyntheticData,
    pub clients: Vec<LocalDataset>,
    pub train: TrainOutcome,
    pub assessments: Vec<AssessmentRow>,
    pub evasion_events: Vec<AttackEvent>,
    pub headline: Headline,
}

pub fn generate_clients(cfg: &ExperimentConfig, protos: &PrototypeSet) -> Result<(SyntheticData, Vec<LocalDataset>)> {
    let data = generate_synthetic_dataset(cfg, protos)?;
    let clients = partition_non_iid(&data.train, cfg.federation.clients, cfg.data.dirichlet_beta, cfg.seed)?;
    Ok((data, clients))
}

/// Full pipeline without touching the filesystem.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let prototypes = build_prototypes(cfg).map_err(|e| e.in_stage("prototypes"))?;
    let (data, clients) = generate_clients(cfg, &prototypes).map_err(|e| e.in_stage("gen"))?;
    let train =
        train_federation(cfg, &prototypes, &clients, &data.test, |_, _| Ok(())).map_err(|e| e.in_stage("train"))?;
    let (assessments, evasion_events) =
        infer_batch(cfg, &prototypes, &train.global, &data.test).map_err(|e| e.in_stage("infer"))?;
    let entropies: Vec<f64> = train.reports.iter().map(|r| r.entropy).collect();
    let deltas: Vec<f64> = train.reports.iter().map(|r| r.delta_entropy).collect();
    let headline = analyze(cfg, &prototypes, &entropies, &deltas, &train.alignment, &assessments)
        .map_err(|e| e.in_stage("report"))?
        .headline;
    Ok(PipelineOutcome {
        prototypes,
        data,
        clients,
        train,
        assessments,
        evasion_events,
        headline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    /// Mean trust entropy over rounds.
    pub entropy: f64,
    pub seen_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySweep {
    pub points: Vec<SweepPoint>,
    /// Accuracy against centered entropy; `None` if entropies coincide.
    pub fit: Option<RegressionFit>,
}

pub const STANDARD_SWEEP_BETAS: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

/// Re-runs the pipeline across Dirichlet concentrations.
pub fn diversity_sweep(cfg: &ExperimentConfig, betas: &[f64]) -> Result<DiversitySweep> {
    let mut points = Vec::new();
    for &beta in betas {
        let mut c = cfg.clone();
        c.data.dirichlet_beta = beta;
        let out = run_in_memory(&c)?;
        let hs: Vec<f64> = out.train.reports.iter().map(|r| r.entropy).collect();
        points.push(SweepPoint {
            beta,
            entropy: mean(&hs),
            seen_accuracy: out.headline.seen_accuracy,
        });
    }
    let hs: Vec<f64> = points.iter().map(|p| p.entropy).collect();
    let h_mean = mean(&hs);
    let centered: Vec<f64> = hs.iter().map(|h| h - h_mean).collect();
    let accs: Vec<f64> = points.iter().map(|p| p.seen_accuracy).collect();
    let fit = ols_fit(&centered, &accs).ok();
    Ok(DiversitySweep { points, fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_source: String,
    pub config_sha256: String,
    pub seed: u64,
    pub headline: Headline,
    pub generated_at: String,
}

/// Result of [`Experiment::run`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub manifest: Manifest,
    pub train: TrainOutcome,
    pub assessments: Vec<AssessmentRow>,
}

/// File-backed pipeline rooted at `out`.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        Ok(Self { config, out })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn novel(&self) -> BTreeSet<String> {
        self.config.concepts.novel.iter().cloned().collect()
    }

    pub fn write_resolved_config(&self) -> Result<()> {
        write_text(&self.path("config.resolved.toml"), &self.config.to_toml()?)
    }

    pub fn prototypes(&self) -> Result<PrototypeSet> {
        let run = || -> Result<PrototypeSet> {
            let protos = build_prototypes(&self.config)?;
            self.write_prototypes(&protos)?;
            Ok(protos)
        };
        run().map_err(|e| e.in_stage("prototypes"))
    }

    fn write_prototypes(&self, protos: &PrototypeSet) -> Result<()> {
        ensure_dir(&self.out)?;
        let json = serde_json::to_string_pretty(protos).map_err(|e| Error::format("prototypes", e))?;
        write_text(&self.path("prototypes.json"), &(json + "\n"))?;
        let novel = self.novel();
        let mut header = vec![
            "concept_id".to_owned(),
            "is_novel".into(),
            "disagreement".into(),
            "fused_norm".into(),
        ];
        let first = protos.iter().next().ok_or(Error::Empty("prototype set"))?;
        header.extend(first.members.iter().map(|m| format!("norm_{}", m.encoder_id)));
        let rows: Vec<Vec<String>> = protos
            .iter()
            .map(|p| {
                let mut row = vec![
                    p.concept_id.clone(),
                    novel.contains(&p.concept_id).to_string(),
                    num(p.disagreement),
                    num(p.fused.norm()),
                ];
                row.extend(p.members.iter().map(|m| num(m.norm())));
                row
            })
            .collect();
        write_csv(&self.path("prototypes.csv"), &header, &rows)
    }

    pub fn load_prototypes(&self) -> Result<PrototypeSet> {
        let path = self.path("prototypes.json");
        if !path.exists() {
            return Err(Error::Config(format!(
                "{} not found; run the prototypes stage first",
                path.display()
            )));
        }
        let protos: PrototypeSet =
            serde_json::from_str(&read_text(&path)?).map_err(|e| Error::format("prototypes.json", e))?;
        PrototypeSet::new(protos.iter().cloned().collect())
    }

    pub fn generate(&self, protos: &PrototypeSet) -> Result<(SyntheticData, Vec<LocalDataset>)> {
        let run = || -> Result<(SyntheticData, Vec<LocalDataset>)> {
            let (data, clients) = generate_clients(&self.config, protos)?;
            let d = self.config.dimensions.d;
            for c in &clients {
                write_features(
                    &self.path(&format!("data/clients/client_{:03}.csv", c.client_id)),
                    &c.samples,
                    d,
                )?;
            }
            let test: Vec<FeatureVector> = data.test.iter().map(|s| s.features.clone()).collect();
            write_features(&self.path("data/test.csv"), &test, d)?;
            let rows: Vec<Vec<String>> = data
                .scaler
                .scales
                .iter()
                .enumerate()
                .map(|(i, s)| vec![format!("f{i}"), num(*s)])
                .collect();
            write_csv(&self.path("data/scaler.csv"), &["feature", "scale (raw units)"], &rows)?;
            write_matrix(&self.path("data/planted.bin"), &data.planted)?;
            Ok((data, clients))
        };
        run().map_err(|e| e.in_stage("gen"))
    }

    pub fn load_clients(&self) -> Result<Vec<LocalDataset>> {
        (0..self.config.federation.clients)
            .map(|i| {
                let samples = read_features(&self.path(&format!("data/clients/client_{i:03}.csv")))?;
                Ok(LocalDataset::new(i, samples))
            })
            .collect()
    }

    pub fn load_test(&self) -> Result<Vec<TestSample>> {
        let novel = self.novel();
        Ok(read_features(&self.path("data/test.csv"))?
            .into_iter()
            .enumerate()
            .map(|(sample_id, features)| TestSample {
                sample_id,
                is_novel: features.label.as_ref().is_some_and(|l| novel.contains(l)),
                features,
            })
            .collect())
    }

    pub fn train(&self, protos: &PrototypeSet, clients: &[LocalDataset], test: &[TestSample]) -> Result<TrainOutcome> {
        let run = || -> Result<TrainOutcome> {
            let snapshots = self.config.report.write_snapshots;
            let mut checksums = Vec::new();
            let outcome = train_federation(&self.config, protos, clients, test, |t, w| {
                checksums.push(vec![t.to_string(), w.checksum()]);
                if snapshots {
                    write_matrix(&self.path(&format!("model/snapshots/round_{t:03}.bin")), w)?;
                }
                Ok(())
            })?;
            write_matrix(&self.path("model/global.bin"), &outcome.global)?;
            write_csv(&self.path("model/checksums.csv"), &["t", "sha256"], &checksums)?;
            self.write_rounds(&outcome)?;
            self.write_train_metrics(&outcome)?;
            Ok(outcome)
        };
        run().map_err(|e| e.in_stage("train"))
    }

    fn write_rounds(&self, outcome: &TrainOutcome) -> Result<()> {
        let mut rows = Vec::new();
        let mut attacks = Vec::new();
        for r in &outcome.reports {
            for c in &r.clients {
                rows.push(vec![
                    r.t.to_string(),
                    c.client_id.to_string(),
                    opt(c.loss),
                    opt(c.tau),
                    num(c.u),
                    opt(c.alpha),
                    num(r.entropy),
                    num(r.delta_entropy),
                    num(r.deviation_norm),
                ]);
            }
            attacks.extend(r.attacks.iter().map(attack_row));
        }
        write_csv(
            &self.path("rounds.csv"),
            &["t", "client_id", "loss", "tau", "u", "alpha", "H", "dH", "dev_norm"],
            &rows,
        )?;
        write_csv(&self.path("attacks.csv"), &ATTACK_HEADER, &attacks)
    }

    fn write_train_metrics(&self, outcome: &TrainOutcome) -> Result<()> {
        let rows: Vec<Vec<String>> = outcome
            .alignment
            .iter()
            .enumerate()
            .map(|(t, a)| {
                let delta = if t == 0 { 0.0 } else { a - outcome.alignment[t - 1] };
                vec![t.to_string(), num(*a), num(delta)]
            })
            .collect();
        write_csv(
            &self.path("metrics/alignment.csv"),
            &["t (round)", "A (1/embedding distance)", "dA (1/embedding distance)"],
            &rows,
        )?;
        let rows: Vec<Vec<String>> = outcome
            .client_diversity
            .iter()
            .map(|c| {
                vec![
                    c.client_id.to_string(),
                    c.samples.to_string(),
                    num(c.mean_disagreement),
                    num(c.accuracy),
                ]
            })
            .collect();
        write_csv(
            &self.path("metrics/client_diversity.csv"),
            &[
                "client_id",
                "samples (count)",
                "mean_disagreement (embedding L2)",
                "accuracy (fraction)",
            ],
            &rows,
        )?;
        let xs: Vec<f64> = outcome.client_diversity.iter().map(|c| c.mean_disagreement).collect();
        let ys: Vec<f64> = outcome.client_diversity.iter().map(|c| c.accuracy).collect();
        let fit_rows = match ols_fit(&xs, &ys) {
            Ok(f) => vec![vec![num(f.slope), num(f.intercept), num(f.r)]],
            Err(_) => Vec::new(),
        };
        write_csv(
            &self.path("metrics/client_diversity_fit.csv"),
            &["slope (accuracy per disagreement)", "intercept (fraction)", "r"],
            &fit_rows,
        )
    }

    pub fn load_global(&self) -> Result<ProjectionMatrix> {
        read_matrix(&self.path("model/global.bin"))
    }

    pub fn infer(
        &self,
        protos: &PrototypeSet,
        global: &ProjectionMatrix,
        test: &[TestSample],
    ) -> Result<Vec<AssessmentRow>> {
        let run = || -> Result<Vec<AssessmentRow>> {
            let (rows, events) = infer_batch(&self.config, protos, global, test)?;
            let out: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.sample_id.to_string(),
                        r.attributed_concept.clone().unwrap_or_default(),
                        opt(r.confidence),
                        opt(r.zds),
                        r.true_label.clone().unwrap_or_default(),
                        r.is_novel.to_string(),
                    ]
                })
                .collect();
            write_csv(&self.path("assessments.csv"), &ASSESSMENT_HEADER, &out)?;
            if !events.is_empty() {
                let path = self.path("attacks.csv");
                let mut attacks = if path.exists() {
                    read_csv(&path)?.rows
                } else {
                    Vec::new()
                };
                attacks.retain(|r| r.get(2).map(String::as_str) != Some("evasion"));
                attacks.extend(events.iter().map(attack_row));
                write_csv(&path, &ATTACK_HEADER, &attacks)?;
            }
            Ok(rows)
        };
        run().map_err(|e| e.in_stage("infer"))
    }

    fn load_assessments(&self) -> Result<Vec<AssessmentRow>> {
        let t = read_csv(&self.path("assessments.csv"))?;
        let col = |n| t.column(n);
        let (id, con, conf, zds, lab, nov) = (
            col("sample_id")?,
            col("attributed_concept")?,
            col("confidence")?,
            col("zds")?,
            col("true_label_if_known")?,
            col("is_novel_flag")?,
        );
        t.rows
            .iter()
            .map(|r| {
                Ok(AssessmentRow {
                    sample_id: r[id]
                        .parse()
                        .map_err(|_| Error::format("assessments.csv", "bad sample_id"))?,
                    attributed_concept: Some(r[con].clone()).filter(|s| !s.is_empty()),
                    confidence: parse_opt_f64(&r[conf], "confidence")?,
                    zds: parse_opt_f64(&r[zds], "zds")?,
                    true_label: Some(r[lab].clone()).filter(|s| !s.is_empty()),
                    is_novel: r[nov] == "true",
                })
            })
            .collect()
    }

    /// Per-round (H, dH) in round order.
    fn load_entropies(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = read_csv(&self.path("rounds.csv"))?;
        let (ct, ch, cd) = (t.column("t")?, t.column("H")?, t.column("dH")?);
        let mut by_round: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for r in &t.rows {
            let round: usize = r[ct].parse().map_err(|_| Error::format("rounds.csv", "bad t"))?;
            by_round.insert(round, (parse_f64(&r[ch], "H")?, parse_f64(&r[cd], "dH")?));
        }
        Ok(by_round.values().copied().unzip())
    }

    fn load_alignment(&self) -> Result<Vec<f64>> {
        let path = self.path("metrics/alignment.csv");
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_csv(&path)?
            .rows
            .iter()
            .map(|r| parse_f64(&r[1], "alignment"))
            .collect()
    }

    /// Metrics from the logs of earlier stages, plus the manifest.
    pub fn report(&self) -> Result<Manifest> {
        let run = || -> Result<Manifest> {
            let protos = self.load_prototypes()?;
            let (entropies, deltas) = self.load_entropies()?;
            let alignment = self.load_alignment()?;
            let rows = self.load_assessments()?;
            let analysis = analyze(&self.config, &protos, &entropies, &deltas, &alignment, &rows)?;
            self.write_report(&protos, &entropies, &analysis)?;
            self.write_encoder_metrics()?;
            let manifest = Manifest {
                data_source: DATA_SOURCE_NOTE.into(),
                config_sha256: self.config.hash()?,
                seed: self.config.seed,
                headline: analysis.headline.clone(),
                generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            };
            let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e))?;
            write_text(&self.path("manifest.json"), &(json + "\n"))?;
            Ok(manifest)
        };
        run().map_err(|e| e.in_stage("report"))
    }

    fn write_report(&self, protos: &PrototypeSet, entropies: &[f64], a: &Analysis) -> Result<()> {
        if let Some(e) = &a.entropy {
            let rows: Vec<Vec<String>> = entropies
                .iter()
                .enumerate()
                .map(|(t, h)| {
                    vec![
                        t.to_string(),
                        num(*h),
                        num(e.shift.points[t].1),
                        num(e.delta.points[t].1),
                    ]
                })
                .collect();
            write_csv(
                &self.path("metrics/trust_entropy.csv"),
                &["t (round)", "H (nats)", "H_shift (nats)", "dH (nats)"],
                &rows,
            )?;
            write_csv(
                &self.path("metrics/entropy_fit.csv"),
                &["gamma (nats/round)", "c (nats)", "r"],
                &[vec![num(e.fit.slope), num(e.fit.intercept), num(e.fit.r)]],
            )?;
        }
        let centered: Vec<Vec<String>> = if entropies.is_empty() {
            Vec::new()
        } else {
            let m = mean(entropies);
            entropies
                .iter()
                .enumerate()
                .map(|(t, h)| vec![t.to_string(), num(h - m)])
                .collect()
        };
        write_csv(
            &self.path("metrics/centered_entropy.csv"),
            &["t (round)", "H_c (nats)"],
            &centered,
        )?;

        let cal: Vec<Vec<String>> = a
            .calibration
            .iter()
            .flat_map(|c| c.bins.iter())
            .map(|(x, y, n)| vec![num(*x), num(*y), n.to_string()])
            .collect();
        write_csv(
            &self.path("metrics/calibration.csv"),
            &[
                "bin_center (disagreement, embedding L2)",
                "mean_confidence (cosine)",
                "count (samples)",
            ],
            &cal,
        )?;

        let h = &a.headline;
        let fmt_opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let zs = vec![
            vec!["seen_accuracy".into(), num(h.seen_accuracy)],
            vec!["novel_auroc".into(), fmt_opt(h.novel_auroc)],
            vec!["best_threshold".into(), fmt_opt(h.best_threshold)],
            vec!["threshold_accuracy".into(), fmt_opt(h.threshold_accuracy)],
            vec!["calibration_monotone".into(), h.calibration_monotone.to_string()],
            vec!["abstentions".into(), h.abstentions.to_string()],
        ];
        write_csv(
            &self.path("metrics/zero_shot.csv"),
            &["metric", "value (fraction or zds)"],
            &zs,
        )?;

        let sweep: Vec<Vec<String>> = a
            .sweep
            .iter()
            .map(|s| vec![num(s.threshold), num(s.accuracy)])
            .collect();
        write_csv(
            &self.path("metrics/threshold_sweep.csv"),
            &["threshold (zds)", "detection_accuracy (fraction)"],
            &sweep,
        )?;

        let sim: Vec<Vec<String>> = a
            .similarity
            .iter()
            .map(|(g, v)| {
                if v.is_empty() {
                    vec![(*g).into(), String::new(), String::new(), "0".into()]
                } else {
                    vec![(*g).into(), num(mean(v)), num(std_dev(v)), v.len().to_string()]
                }
            })
            .collect();
        write_csv(
            &self.path("metrics/similarity.csv"),
            &[
                "group",
                "mean_confidence (cosine)",
                "std_confidence (cosine, population)",
                "count (samples)",
            ],
            &sim,
        )?;

        let novel = self.novel();
        let pd: Vec<Vec<String>> = protos
            .iter()
            .map(|p| {
                vec![
                    p.concept_id.clone(),
                    novel.contains(&p.concept_id).to_string(),
                    num(p.disagreement),
                    num(p.fused.norm()),
                ]
            })
            .collect();
        write_csv(
            &self.path("metrics/disagreement.csv"),
            &[
                "concept_id",
                "is_novel",
                "disagreement (embedding L2)",
                "fused_norm (embedding L2)",
            ],
            &pd,
        )?;
        let ds: Vec<f64> = protos.iter().map(|p| p.disagreement).collect();
        let lo = ds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        write_csv(
            &self.path("metrics/disagreement_stats.csv"),
            &[
                "mean (embedding L2)",
                "std (embedding L2, population)",
                "min (embedding L2)",
                "max (embedding L2)",
            ],
            &[vec![num(mean(&ds)), num(std_dev(&ds)), num(lo), num(hi)]],
        )
    }

    /// Latency regression and norm statistics of each configured profile
    /// under the stub model.
    fn write_encoder_metrics(&self) -> Result<()> {
        let stats = encoder_statistics(&self.config)?;
        let lat: Vec<Vec<String>> = stats
            .iter()
            .map(|s| {
                vec![
                    s.encoder_id.clone(),
                    s.samples.to_string(),
                    num(s.latency_mean),
                    num(s.latency_std),
                    num(s.latency_cv),
                    num(s.fit.slope),
                    num(s.fit.intercept),
                    num(s.fit.r),
                ]
            })
            .collect();
        write_csv(
            &self.path("metrics/encoder_latency.csv"),
            &[
                "encoder_id",
                "samples (count)",
                "mean (ms)",
                "std (ms, population)",
                "cv",
                "slope (ms/token)",
                "intercept (ms)",
                "r",
            ],
            &lat,
        )?;
        let norms: Vec<Vec<String>> = stats
            .iter()
            .map(|s| {
                vec![
                    s.encoder_id.clone(),
                    s.samples.to_string(),
                    num(s.norm_mean),
                    num(s.norm_std),
                ]
            })
            .collect();
        write_csv(
            &self.path("metrics/semantic_strength.csv"),
            &[
                "encoder_id",
                "samples (count)",
                "mean_norm (embedding L2)",
                "std_norm (embedding L2, population)",
            ],
            &norms,
        )
    }

    /// All stages in order.
    pub fn run(&self) -> Result<ExperimentOutcome> {
        ensure_dir(&self.out)?;
        self.write_resolved_config()?;
        let protos = self.prototypes()?;
        let (data, clients) = self.generate(&protos)?;
        let train = self.train(&protos, &clients, &data.test)?;
        let assessments = self.infer(&protos, &train.global, &data.test)?;
        let manifest = self.report()?;
        Ok(ExperimentOutcome {
            manifest,
            train,
            assessments,
        })
    }
}

const ATTACK_HEADER: [&str; 4] = ["t", "client_id", "kind", "magnitude"];
const ASSESSMENT_HEADER: [&str; 6] = [
    "sample_id",
    "attributed_concept",
    "confidence",
    "zds",
    "true_label_if_known",
    "is_novel_flag",
];

fn attack_row(e: &AttackEvent) -> Vec<String> {
    vec![
        e.round.to_string(),
        e.client_id.map(|c| c.to_string()).unwrap_or_default(),
        e.kind.clone(),
        num(e.magnitude),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStats {
    pub encoder_id: String,
    pub samples: usize,
    pub latency_mean: f64,
    pub latency_std: f64,
    pub latency_cv: f64,
    pub fit: RegressionFit,
    pub norm_mean: f64,
    pub norm_std: f64,
}

/// Stub-encoder statistics over a synthetic corpus of
/// `report.latency_corpus_size` texts.
pub fn encoder_statistics(cfg: &ExperimentConfig) -> Result<Vec<EncoderStats>> {
    let corpus = synthetic_corpus(cfg.report.latency_corpus_size, cfg.seed);
    let tokens: Vec<f64> = corpus.iter().map(|t| crate::encoding::token_count(t) as f64).collect();
    cfg.encoders
        .iter()
        .map(|p| {
            let enc = StubEncoder::new(p.clone(), cfg.seed)?;
            let encoded: Vec<_> = corpus
                .iter()
                .map(|t| enc.encode(t, cfg.dimensions.k))
                .collect::<Result<_>>()?;
            let lat: Vec<f64> = encoded.iter().map(|e| e.latency_ms).collect();
            let embs: Vec<_> = encoded.into_iter().map(|e| e.embedding).collect();
            let (norm_mean, norm_std) = semantic_strength(&embs)?;
            Ok(EncoderStats {
                encoder_id: p.encoder_id.clone(),
                samples: corpus.len(),
                latency_mean: mean(&lat),
                latency_std: std_dev(&lat),
                latency_cv: coefficient_of_variation(&lat)?,
                fit: ols_fit(&tokens, &lat)?,
                norm_mean,
                norm_std,
            })
        })
        .collect()
}
