use std::io::Write;
use std::time::Instant;

use ep_core::analysis::{
    behavioural_label, concept_eval, correspondence_f1, partition_neighbourhood, read_profiles_csv,
    saturation_compare, select_labels, write_correspondence_csv, write_labels_csv, write_profiles_csv,
    write_saturation_csv, write_saturation_curves_csv, TokenProfiler,
};
use ep_core::inference::{assign_batch, assign_topn, write_assignments_csv};
use ep_core::matching::{write_cross_tab_csv, write_match_csv};
use ep_core::stability::{size_controlled_coherence, write_stability_csv, write_stability_summary_csv};
use ep_core::stream::{permute_provenance, read_sidecar, shuffle_stream, write_sidecar, StreamHeader, StreamWriter, HEADER_LEN};
use ep_core::synth::{uniform_direction, VmfMixture};
use ep_core::{
    adapter, calibrate_stream, coverage_stats, cross_seed_stability, cross_tab, match_dictionaries, BuildConfig,
    BuildInfo, BuildTrace, Calibration, Error,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::io::*;
use crate::*;

const READ_BATCH: usize = 1 << 14;

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Domain(e.to_string()))?;
    }
    match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Build(a) => build(a),
        Command::Assign(a) => assign(a),
        Command::Ood(a) => ood(a),
        Command::Encode(a) => encode(a),
        Command::Match(a) => matching(a),
        Command::CrossTab(a) => crosstab(a),
        Command::Stability(a) => stability(a),
        Command::Neighbourhood(a) => neighbourhood(a),
        Command::Tokens(a) => tokens(a),
        Command::Correspond(a) => correspond(a),
        Command::Label(a) => label(a),
        Command::Concept(a) => concept(a),
        Command::Saturation(a) => saturation(a),
        Command::Shuffle(a) => shuffle(a),
        Command::Info(a) => info(a),
        Command::Synth(a) => synth(a),
    }
}

fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let f = &a.calibration;
    let mut reader = open_stream(&a.stream, READ_BATCH)?;
    let cal = calibrate_stream(&mut reader, f.p, f.budget, f.calibration_seed)?;
    write_json(&a.out, &cal)?;
    println!(
        "theta={:.6} p={} sample={} pairs={} skipped={}",
        cal.theta, cal.p, cal.sample_budget, cal.pair_count, cal.skipped_degenerate
    );
    Ok(())
}

fn build(a: BuildArgs) -> CliResult<()> {
    let start = Instant::now();
    let (calibration, in_stream) = match (&a.calibration, a.p) {
        (Some(path), _) => {
            let cal: Calibration = serde_json::from_reader(open(path)?)
                .map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
            cal.validate()?;
            (cal, false)
        }
        (None, Some(p)) => {
            let mut reader = open_stream(&a.stream, a.batch)?;
            (calibrate_stream(&mut reader, p, a.budget, a.calibration_seed)?, true)
        }
        (None, None) => return Err(Failure::Usage("either --p or --calibration is required".into())),
    };
    let config = BuildConfig {
        batch_size: a.batch,
        sat_window: a.window,
        max_activations: a.max_activations,
        seed: a.seed,
    };
    let info = BuildInfo {
        model: a.model,
        hook: a.hook,
        layer: a.layer,
        stream: Some(a.stream.display().to_string()),
        calibration_in_stream: in_stream,
        ..BuildInfo::default()
    };
    let mut reader = open_stream(&a.stream, a.batch)?;
    let (dict, trace) = ep_core::build(&mut reader, calibration, config, info)?;
    write_with(&a.out, |w| dict.save(w).map(|_| ()))?;
    if let Some(path) = &a.trace {
        write_with(path, |w| trace.write_csv(w))?;
    }
    println!(
        "K={} tokens={} theta={:.6} p={} saturated={} seconds={:.3}",
        dict.len(),
        dict.total_consumed,
        dict.theta(),
        dict.calibration.p,
        dict.saturated,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn assign(a: AssignArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    let (dim, rows) = read_vectors(&a.stream)?;
    ep_core::geometry::check_dim(dict.dim(), dim)?;
    let out = assign_batch(&dict, &rows, a.basis)?;
    let top = match a.top {
        Some(n) => {
            let mut lines = Vec::new();
            for (i, row) in rows.chunks_exact(dim).enumerate() {
                match assign_topn(&dict, row, n, a.basis) {
                    Ok(list) => lines.extend(list.into_iter().enumerate().map(|(r, (id, d))| (i, r, id, d))),
                    Err(Error::DegenerateActivation { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            Some(lines)
        }
        None => None,
    };
    write_with(&a.out, |w| write_assignments_csv(w, 0, &out))?;
    if let (Some(lines), Some(n)) = (top, a.top) {
        let path = a.out.with_extension(format!("top{n}.csv"));
        write_with(&path, |w| {
            writeln!(w, "index,rank,region,distance")?;
            for (i, r, id, d) in lines {
                writeln!(w, "{i},{r},{id},{d}")?;
            }
            Ok(())
        })?;
    }
    let skipped = out.iter().filter(|a| a.is_none()).count();
    println!("assigned={} skipped_degenerate={skipped}", out.len() - skipped);
    Ok(())
}

fn ood(a: OodArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    let probe = coverage_stats(&dict, &mut open_stream(&a.stream, READ_BATCH)?, a.basis)?;
    let reference = match &a.reference {
        Some(p) => Some(coverage_stats(&dict, &mut open_stream(p, READ_BATCH)?, a.basis)?),
        None => None,
    };
    println!(
        "probe: count={} mean={:.6} se={:.3e} within_theta={:.4}",
        probe.count, probe.mean, probe.std_error, probe.within_theta
    );
    let mut report = json!({ "basis": a.basis.to_string(), "theta": dict.theta(), "probe": probe });
    if let Some(r) = &reference {
        let gap = probe.mean - r.mean;
        println!(
            "reference: count={} mean={:.6} se={:.3e} within_theta={:.4}\ngap={gap:.6} ({:.1} reference standard errors)",
            r.count,
            r.mean,
            r.std_error,
            r.within_theta,
            gap / r.std_error
        );
        report["reference"] = json!(r);
        report["gap"] = json!(gap);
    }
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    let (dim, rows) = read_vectors(&a.stream)?;
    ep_core::geometry::check_dim(dict.dim(), dim)?;
    let codes = adapter::encode_batch(&dict, &rows, a.basis)?;
    write_with(&a.out, |w| adapter::write_codes_csv(w, 0, &codes))?;
    let active = codes.iter().flatten().filter(|c| c.l0() == 1).count();
    println!("codes={} active={active}", codes.len());
    Ok(())
}

fn matching(a: MatchArgs) -> CliResult<()> {
    let da = load_dict(&a.a)?;
    let db = load_dict(&a.b)?;
    let report = match_dictionaries(&da, &db, a.basis, a.cutoff)?;
    write_with(&a.out, |w| write_match_csv(w, &report))?;
    println!(
        "pairs={} persisted={} dropped={} introduced={} median_cosine={:.4} median_normalized_distance={:.4}",
        report.pairs.len(),
        report.persisted_count(),
        report.dropped.len(),
        report.introduced.len(),
        report.median_cosine,
        report.median_normalized_distance
    );
    Ok(())
}

fn crosstab(a: CrossTabArgs) -> CliResult<()> {
    let da = load_dict(&a.a)?;
    let db = load_dict(&a.b)?;
    let tab = cross_tab(&da, &db, a.basis)?;
    write_with(&a.out, |w| write_cross_tab_csv(w, &tab))?;
    println!("median={:.4} p99={:.4} max={:.4}", tab.median, tab.p99, tab.max);
    Ok(())
}

fn stability(a: StabilityArgs) -> CliResult<()> {
    let dicts = a.dicts.iter().map(|p| load_dict(p)).collect::<CliResult<Vec<_>>>()?;
    let report = cross_seed_stability(&dicts)?;
    write_with(&a.out, |w| write_stability_csv(w, &report))?;
    if let Some(path) = &a.summary {
        write_with(path, |w| write_stability_summary_csv(w, &report))?;
    }
    for (name, rho) in &report.rho {
        match rho {
            Some(r) => println!("spearman {name} {r:.4}"),
            None => println!("spearman {name} undefined"),
        }
    }
    let means: Vec<String> = report
        .quintile_means
        .iter()
        .map(|m| m.map_or("-".into(), |m| format!("{m:.4}")))
        .collect();
    println!("quintile_means {}", means.join(" "));
    Ok(())
}

fn neighbourhood(a: NeighbourhoodArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    for id in partition_neighbourhood(&dict, a.a, a.b, a.basis)? {
        println!("{id}");
    }
    Ok(())
}

fn tokens(a: TokensArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    let ids: Vec<u32> = read_column(&a.tokens)?;
    let mut reader = open_stream(&a.stream, READ_BATCH)?;
    let declared = reader.header().count;
    if declared != 0 && declared != ids.len() as u64 {
        return Err(Error::LengthMismatch {
            left: declared as usize,
            right: ids.len(),
        }
        .into());
    }
    let mut profiler = TokenProfiler::new(&dict, a.basis)?;
    while let Some(batch) = reader.next_batch_limited(usize::MAX)? {
        let start = batch.start as usize;
        let end = start + batch.len();
        let Some(slice) = ids.get(start..end) else {
            return Err(Error::LengthMismatch { left: end, right: ids.len() }.into());
        };
        profiler.add_batch(batch.as_flat(), slice)?;
    }
    let skipped = profiler.skipped_degenerate();
    let profiles = profiler.finish(a.k, a.min_activations);
    write_with(&a.out, |w| write_profiles_csv(w, &profiles))?;
    println!(
        "regions={} eligible={} skipped_degenerate={skipped}",
        profiles.len(),
        profiles.iter().filter(|p| p.eligible).count()
    );
    Ok(())
}

fn correspond(a: CorrespondArgs) -> CliResult<()> {
    let pa = read_profiles_csv(open(&a.a)?)?;
    let pb = read_profiles_csv(open(&a.b)?)?;
    let coherence = match &a.dict {
        Some(p) => Some(size_controlled_coherence(&load_dict(p)?)?),
        None => None,
    };
    let report = correspondence_f1(&pa, &pb, a.strong, coherence.as_deref())?;
    write_with(&a.out, |w| write_correspondence_csv(w, &report))?;
    println!(
        "units={} mean_f1={:.4} strong={:.4} q5_strong={} b_caught={:.4}",
        report.rows.len(),
        report.mean_f1,
        report.strong_fraction,
        report.q5_strong_fraction.map_or("-".into(), |v| format!("{v:.4}")),
        report.b_caught_fraction
    );
    Ok(())
}

fn label(a: LabelArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    let (dim, rows) = read_vectors(&a.stream)?;
    ep_core::geometry::check_dim(dict.dim(), dim)?;
    let scores: Vec<f64> = read_column(&a.scores)?;
    let assigned = assign_batch(&dict, &rows, a.basis)?;
    if assigned.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: assigned.len(),
            right: scores.len(),
        }
        .into());
    }
    let (regions, kept): (Vec<u32>, Vec<f64>) = assigned
        .iter()
        .zip(&scores)
        .filter_map(|(r, s)| r.map(|r| (r.region, *s)))
        .unzip();
    let labels = behavioural_label(&regions, &kept)?;
    write_with(&a.out, |w| write_labels_csv(w, &labels, a.threshold))?;
    let selected: Vec<String> = select_labels(&labels, a.threshold).iter().map(u32::to_string).collect();
    println!("selected {}", selected.join(" "));
    Ok(())
}

fn mean_of(path: &std::path::Path) -> CliResult<Vec<f32>> {
    let (dim, rows) = read_vectors(path)?;
    let n = rows.len() / dim;
    if n == 0 {
        return Err(Error::EmptyInput.into());
    }
    let mut acc = vec![0f64; dim];
    for r in rows.chunks_exact(dim) {
        for (s, x) in acc.iter_mut().zip(r) {
            *s += *x as f64;
        }
    }
    Ok(acc.iter().map(|s| (s / n as f64) as f32).collect())
}

fn concept(a: ConceptArgs) -> CliResult<()> {
    let dict = load_dict(&a.dict)?;
    let (_, pos) = read_vectors(&a.positives)?;
    let (_, con) = read_vectors(&a.contrastives)?;
    let held = match (&a.held_out_positives, &a.held_out_negatives) {
        (Some(p), Some(n)) => Some((read_vectors(p)?.1, read_vectors(n)?.1)),
        _ => None,
    };
    let centre = a.centre_from.as_deref().map(mean_of).transpose()?;
    let eval = concept_eval(
        &dict,
        &a.name,
        &pos,
        &con,
        held.as_ref().map(|(p, n)| (p.as_slice(), n.as_slice())),
        a.basis,
        centre.as_deref(),
    )?;
    match &a.out {
        Some(path) => write_json(path, &eval)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&eval).map_err(|e| Failure::Domain(e.to_string()))?
        ),
    }
    if a.out.is_some() {
        println!(
            "concept={} region={} score={:.4} auroc={}",
            eval.concept,
            eval.region,
            eval.score,
            eval.auroc.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn saturation(a: SaturationArgs) -> CliResult<()> {
    let mut traces = Vec::new();
    for (name, path) in &a.runs {
        let mut trace = BuildTrace::read_csv(open(path)?, false)?;
        let n = trace.records.len();
        trace.saturated = n >= a.window && trace.records[n - a.window..].iter().all(|r| r.spawned == 0);
        traces.push((name.clone(), trace));
    }
    let rows = saturation_compare(&traces);
    write_with(&a.out, |w| write_saturation_csv(w, &rows))?;
    if let Some(path) = &a.curves {
        write_with(path, |w| write_saturation_curves_csv(w, &traces))?;
    }
    for r in &rows {
        println!(
            "{} activations={} K={} saturated={}",
            r.name, r.activations, r.final_k, r.saturated
        );
    }
    Ok(())
}

fn shuffle(a: ShuffleArgs) -> CliResult<()> {
    let header = open_stream(&a.stream, 1)?.header();
    let sidecar = match &a.sidecar {
        Some(path) => {
            let records = read_sidecar(open(path)?)?;
            if records.len() as u64 != header.count {
                return Err(Error::LengthMismatch {
                    left: header.count as usize,
                    right: records.len(),
                }
                .into());
            }
            Some(records)
        }
        None => None,
    };
    let mut perm = Vec::new();
    write_with(&a.out, |w| {
        perm = shuffle_stream(open(&a.stream).map_err(|e| Error::InvalidArgument(e.to_string()))?, a.seed, w)?.1;
        Ok(())
    })?;
    if let (Some(records), Some(path)) = (sidecar, &a.sidecar_out) {
        let permuted = permute_provenance(&records, &perm);
        write_with(path, |w| write_sidecar(w, &permuted))?;
    }
    println!("records={} seed={}", perm.len(), a.seed);
    Ok(())
}

fn info(a: InfoArgs) -> CliResult<()> {
    if let Some(path) = &a.dict {
        let dict = load_dict(path)?;
        println!("{}", dict.manifest_json()?);
        return Ok(());
    }
    let Some(path) = &a.stream else {
        return Err(Failure::Usage("one of --dict or --stream is required".into()));
    };
    let header = open_stream(path, 1)?.header();
    let size = std::fs::metadata(path)
        .map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?
        .len();
    let payload = size.saturating_sub(HEADER_LEN as u64);
    let rec = header.record_bytes() as u64;
    let records = payload / rec;
    println!(
        "dim={} declared_count={} records={} bytes={size}",
        header.dim, header.count, records
    );
    if payload % rec != 0 {
        return Err(Error::TruncatedPayload(format!("{} bytes past the last whole record", payload % rec)).into());
    }
    if header.count != 0 && header.count != records {
        return Err(Error::TruncatedPayload(format!(
            "header declares {} records, file holds {records}",
            header.count
        ))
        .into());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    if !(a.kappa > 0.0 && a.kappa.is_finite()) {
        return Err(Failure::Usage("--kappa must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let offset: Vec<f64> = uniform_direction(&mut rng, a.dim).iter().map(|x| a.offset * x).collect();
    let mixture = VmfMixture::random(&mut rng, a.clusters, a.dim, a.kappa)?.with_offset(offset, 1.0);
    let (rows, labels) = if a.uniform {
        (mixture.sample_uniform(&mut rng, a.n), Vec::new())
    } else {
        mixture.sample(&mut rng, a.n)
    };
    let header = StreamHeader::new(a.dim as u32, a.n as u64)?;
    write_with(&a.out, |w| {
        let mut writer = StreamWriter::new(header, w)?;
        writer.push_rows(&rows)?;
        writer.finish().map(|_| ())
    })?;
    if let Some(path) = &a.labels {
        write_with(path, |w| {
            for l in &labels {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })?;
    }
    println!("vectors={} dim={} clusters={}", a.n, a.dim, a.clusters);
    Ok(())
}
