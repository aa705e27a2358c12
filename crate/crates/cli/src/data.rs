//! Data-producing commands: phantom generation, anchor selection, and
//! representation extraction.

use abfr_core::anchors::{
    boundary_distance_report, gm_bounding_box, save_anchor_set, select_grid_anchors,
    select_random_anchors,
};
use abfr_core::rng::{splitmix64, Rng};
use abfr_core::sampling::{iterative_representation, save_representation, SamplingConfig};
use abfr_core::volume::{
    load_mask, load_nifti, load_raw, make_phantom, phantom_mask, save_mask, save_raw, NiftiData,
    PhantomSpec,
};

use crate::util::{
    ensure_dir, parse_sizes, read_manifest, write_json, write_text, ConfigFile, ManifestRow,
};
use crate::{CliError, PhantomArgs, AnchorArgs, RepresentArgs, NiftiInfoArgs};

pub fn cmd_phantom(args: &PhantomArgs) -> Result<i32, CliError> {
    let cfg = ConfigFile::load(args.config.as_ref())?;
    let subjects = cfg.usize_or(args.subjects, "subjects", 80)?;
    let seed = cfg.seed(args.seed)?;
    let class_effect = cfg.f64_or(args.class_effect, "class_effect", 0.8)?;
    let dims = cfg.usize_or(args.dims, "dims", 24)?;
    let t = cfg.usize_or(args.t, "t", 60)?;
    let noise = cfg.f64_or(args.noise, "noise", 0.5)?;
    let regions = cfg.usize_or(args.regions, "regions", 6)?;
    if subjects == 0 {
        return Err(CliError::Config("subjects must be >= 1".into()));
    }
    ensure_dir(&args.out)?;

    let base = PhantomSpec {
        dims: (dims, dims, dims),
        t,
        outer_radii: (
            dims as f64 * 0.44,
            dims as f64 * 0.44,
            dims as f64 * 0.44,
        ),
        inner_fraction: 0.55,
        n_regions: regions,
        class_effect,
        noise_sigma: noise,
        seed,
    };
    write_json(&args.out.join("config.json"), &base)?;

    let mask = phantom_mask(&base).map_err(|e| CliError::Config(e.to_string()))?;
    save_mask(&mask, &args.out.join("mask.abfv")).map_err(|e| CliError::Run(e.to_string()))?;

    let mut manifest = String::from("subject,file,label\n");
    let mut failures = 0usize;
    let mut chain = seed;
    for i in 0..subjects {
        let subject_seed = splitmix64(&mut chain);
        let label = (i % 2) as u8;
        let mut spec = base.clone();
        spec.seed = subject_seed;
        let file = format!("subject_{i:03}.abfv");
        match make_phantom(&spec, label) {
            Ok((vol, _, _)) => {
                if let Err(e) = save_raw(&vol, &args.out.join(&file)) {
                    eprintln!("subject {i}: write failed: {e}");
                    failures += 1;
                    continue;
                }
                manifest.push_str(&format!("{i},{file},{label}\n"));
            }
            Err(e) => {
                eprintln!("subject {i}: generation failed: {e}");
                failures += 1;
            }
        }
    }
    write_text(&args.out.join("labels.csv"), &manifest)?;
    println!(
        "wrote {} subjects ({} failed) to {}",
        subjects - failures,
        failures,
        args.out.display()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

#[derive(serde::Serialize)]
struct AnchorDiagnostics {
    mode: String,
    n_anchors: usize,
    mean_boundary_distance: f64,
    dropped_candidates: usize,
    seed: u64,
}

pub fn cmd_anchors(args: &AnchorArgs) -> Result<i32, CliError> {
    let cfg = ConfigFile::load(args.config.as_ref())?;
    let count = cfg.usize_or(args.count, "count", 100)?;
    let size = cfg.usize_or(args.size, "size", 8)?;
    let tau = cfg.usize_or(args.tau, "tau", 100)?;
    let stride = cfg.usize_or(args.stride, "stride", size)?;
    let seed = cfg.seed(args.seed)?;
    let mode = cfg.string_or(args.mode.clone(), "mode", "random")?;
    ensure_dir(&args.out)?;

    let mask = load_mask(&args.mask).map_err(|e| CliError::Config(e.to_string()))?;
    let (mut set, dropped) = match mode.as_str() {
        "random" => {
            let mut rng = Rng::stream(seed, 0);
            let set = select_random_anchors(&mask, count, size, tau, &mut rng, None)
                .map_err(|e| CliError::Run(e.to_string()))?;
            (set, 0)
        }
        "grid" => {
            let roi = gm_bounding_box(&mask).map_err(|e| CliError::Run(e.to_string()))?;
            select_grid_anchors(&mask, roi, (stride, stride, stride), size, tau)
                .map_err(|e| CliError::Run(e.to_string()))?
        }
        other => return Err(CliError::Config(format!("mode must be random or grid, got {other}"))),
    };
    set.ensure_labels(&mask).map_err(|e| CliError::Run(e.to_string()))?;
    let (mean, report) =
        boundary_distance_report(&mask, &set, 10).map_err(|e| CliError::Run(e.to_string()))?;
    save_anchor_set(&set, &args.out.join("anchors.json"), &args.out.join("anchors.abfl"))
        .map_err(|e| CliError::Run(e.to_string()))?;
    write_text(&args.out.join("boundary_report.csv"), &report)?;
    write_json(
        &args.out.join("diagnostics.json"),
        &AnchorDiagnostics {
            mode,
            n_anchors: set.anchors.len(),
            mean_boundary_distance: mean,
            dropped_candidates: dropped,
            seed,
        },
    )?;
    println!(
        "selected {} anchors (mean boundary distance {mean:.4})",
        set.anchors.len()
    );
    Ok(0)
}

pub fn cmd_represent(args: &RepresentArgs) -> Result<i32, CliError> {
    let cfg = ConfigFile::load(args.config.as_ref())?;
    let n_patches = cfg.usize_or(args.patches, "patches", 256)?;
    let sizes_text = cfg.string_or(args.sizes.clone(), "sizes", "8,12,16")?;
    let sizes = parse_sizes(&sizes_text)?;
    let tau_sample = cfg.usize_or(args.tau_sample, "tau_sample", 1)?;
    let seed = cfg.seed(args.seed)?;
    let jobs = cfg.usize_or(args.jobs, "jobs", 1)?.max(1);
    ensure_dir(&args.out)?;

    let manifest = read_manifest(&args.data.join("labels.csv"))?;
    let mask = load_mask(&args.data.join("mask.abfv")).map_err(|e| CliError::Config(e.to_string()))?;
    let set = abfr_core::anchors::load_anchor_set(
        &args.anchors.join("anchors.json"),
        &args.anchors.join("anchors.abfl"),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let sampling = SamplingConfig {
        n_patches,
        sizes,
        tau_sample,
    };
    write_json(&args.out.join("config.json"), &sampling)?;

    // Each subject gets its own RNG stream keyed by its manifest position,
    // so the thread count never affects the output.
    let process = |(idx, row): (usize, &ManifestRow)| -> Result<String, String> {
        let vol = load_raw(&args.data.join(&row.file)).map_err(|e| e.to_string())?;
        let mut rng = Rng::stream(seed, idx as u64);
        let rep = iterative_representation(&vol, &mask, &set, &sampling, &mut rng, Some(row.label))
            .map_err(|e| e.to_string())?;
        let file = format!("rep_{}.abfr", row.subject);
        save_representation(&rep, &args.out.join(&file)).map_err(|e| e.to_string())?;
        Ok(file)
    };

    let mut results: Vec<Result<String, String>> = Vec::with_capacity(manifest.len());
    if jobs <= 1 {
        results.extend(manifest.iter().enumerate().map(process));
    } else {
        let indexed: Vec<(usize, &ManifestRow)> = manifest.iter().enumerate().collect();
        let mut slots: Vec<Option<Result<String, String>>> = vec![None; manifest.len()];
        std::thread::scope(|scope| {
            let chunk = indexed.len().div_ceil(jobs);
            for (chunk_items, out_chunk) in
                indexed.chunks(chunk).zip(slots.chunks_mut(chunk))
            {
                let process = &process;
                scope.spawn(move || {
                    for (item, slot) in chunk_items.iter().zip(out_chunk.iter_mut()) {
                        *slot = Some(process(*item));
                    }
                });
            }
        });
        results.extend(slots.into_iter().map(|s| s.expect("worker did not fill slot")));
    }

    let mut failures = 0usize;
    let mut rep_manifest = String::from("subject,file,label\n");
    for (row, result) in manifest.iter().zip(&results) {
        match result {
            Ok(file) => rep_manifest.push_str(&format!("{},{},{}\n", row.subject, file, row.label)),
            Err(e) => {
                eprintln!("subject {}: {e}", row.subject);
                failures += 1;
            }
        }
    }
    write_text(&args.out.join("labels.csv"), &rep_manifest)?;
    println!(
        "wrote {} representations ({} failed) to {}",
        manifest.len() - failures,
        failures,
        args.out.display()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

pub fn cmd_nifti_info(args: &NiftiInfoArgs) -> Result<i32, CliError> {
    let (data, summary) = load_nifti(&args.file).map_err(|e| CliError::Config(e.to_string()))?;
    println!("dims: {:?}", summary.dims);
    println!("datatype: {} (bitpix {})", summary.datatype, summary.bitpix);
    println!("scl_slope: {} scl_inter: {}", summary.scl_slope, summary.scl_inter);
    println!("vox_offset: {}", summary.vox_offset);
    println!("byte-swapped: {}", summary.swapped);
    if let Some(out) = &args.out {
        match data {
            NiftiData::Volume(vol) => {
                save_raw(&vol, out).map_err(|e| CliError::Run(e.to_string()))?
            }
            NiftiData::Mask(mask) => {
                save_mask(&mask, out).map_err(|e| CliError::Run(e.to_string()))?
            }
        }
        println!("converted to {}", out.display());
    }
    Ok(0)
}
