use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::info;
use octseg::checkpoint::{load_checkpoint, load_lora, save_checkpoint, save_lora};
use octseg::data::{
    generate_synthetic, load_mask, load_volume, save_mask, write_synthetic, Dataset, LabelMask, Split,
    SyntheticConfig,
};
use octseg::inference::{predict_volume, PredictionMode};
use octseg::metrics::{aggregate_report, evaluate_volume, ExperimentRecord};
use octseg::prompts::{simulate_points, SliceView};
use octseg::training::{TrainConfig, TrainingSet};
use octseg::{inject_lora, Error, ModelConfig, Regimen, SegmentationModel};
use serde::{Deserialize, Serialize};

use crate::{raster, CliError, EvalArgs, GenerateArgs, PredictArgs, SimulateArgs, TrainArgs};

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let config = SyntheticConfig {
        n_volumes: args.n,
        shape: args.shape,
        classes: args.classes,
        seed: args.seed,
        dual_annotation: args.dual_annotation,
        train_fraction: args.train_fraction,
    };
    let ds = generate_synthetic(&config)?;
    let manifest = write_synthetic(&ds, &args.out)?;
    println!(
        "wrote {} volumes ({} train, {} test) to {}",
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            seed: 0,
        }
    }
}

/// Contents of the `train --config` YAML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Dataset root, relative to the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    /// Seed for a fresh initialization.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lora: LoraSettings,
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut file: TrainFile = serde_yaml::from_str(&fs::read_to_string(&args.config)?)?;
    let data = match (&args.data, &file.data) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => relative_to(&args.config, d),
        (None, None) => {
            return Err(CliError::Usage(
                "no dataset: set `data` in the config or pass --data".into(),
            ))
        }
    };
    let dataset = Dataset::load(&data)?;

    let base = match &file.base_checkpoint {
        Some(p) => {
            let loaded = load_checkpoint(relative_to(&args.config, p))?;
            if let Some(cfg) = file.model {
                if cfg != loaded.model.config {
                    return Err(Error::Config("`model` differs from the base checkpoint's config".into()).into());
                }
            }
            loaded.model
        }
        None => SegmentationModel::init(file.model.unwrap_or_default(), file.init_seed, DType::F32)?,
    };
    let cfg = base.config;
    let regimen = Regimen::from(args.regimen);
    let lora = match regimen {
        Regimen::LoraSamed => Some(inject_lora(
            &cfg,
            file.lora.rank,
            file.lora.alpha,
            file.lora.seed,
            DType::F32,
        )?),
        _ => None,
    };

    let set = TrainingSet::from_dataset(&dataset, Split::Train, &cfg)?;
    info!("training {} on {} slices", regimen.as_str(), set.len());
    let out = octseg::training::train(&set, &base, lora.as_ref(), regimen, &file.train)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("history.csv"), out.history.to_csv())?;
    let steps = out.history.steps.len();
    save_checkpoint(args.out.join("checkpoint.tar"), &out.model, out.lora.as_ref(), regimen, steps)?;
    if let Some(l) = &out.lora {
        save_lora(args.out.join("lora.tar"), l, &cfg, regimen, steps)?;
    }
    file.data = Some(data);
    file.model = Some(cfg);
    fs::write(args.out.join("config.yaml"), serde_yaml::to_string(&file)?)?;

    let last = out.history.steps.last();
    println!(
        "{} steps, final loss {:.4}, wrote {}",
        steps,
        last.map_or(f64::NAN, |s| s.loss),
        args.out.display()
    );
    Ok(())
}

/// Every mask file in `dir`, keyed by volume id.
pub fn load_mask_dir(dir: &Path) -> Result<BTreeMap<String, LabelMask>, CliError> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.sort();
    for p in paths {
        if p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "manifest.json") {
            let mask = load_mask(&p)?;
            if out.insert(mask.volume_id.clone(), mask).is_some() {
                return Err(Error::Validation(format!("{}: duplicate volume id", p.display())).into());
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NotFound(format!("no mask files in {}", dir.display())).into());
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let preds = load_mask_dir(&args.pred)?;
    let refs_a = load_mask_dir(&args.ref_a)?;
    let refs_b = args.ref_b.as_deref().map(load_mask_dir).transpose()?;
    let missing = |id: &str, dir: &Path| Error::NotFound(format!("no reference for `{id}` in {}", dir.display()));

    let mut records = Vec::new();
    for (id, pred) in &preds {
        let a = refs_a.get(id).ok_or_else(|| missing(id, &args.ref_a))?;
        let b = match (&refs_b, &args.ref_b) {
            (Some(m), Some(dir)) => Some(m.get(id).ok_or_else(|| missing(id, dir))?),
            _ => None,
        };
        for record in evaluate_volume(pred, a, b, a.spacing, &a.classes)? {
            records.push(ExperimentRecord {
                experiment: args.experiment.clone(),
                record,
            });
        }
    }
    let report = aggregate_report(&records)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, report.to_csv())?;
    println!("{}", report.render_table());
    Ok(())
}

pub fn simulate_prompts(args: &SimulateArgs) -> Result<(), CliError> {
    let (labels, height, width, num_classes) = if args.mask.extension().is_some_and(|e| e == "png") {
        let img = image::open(&args.mask)?.to_luma8();
        let (w, h) = img.dimensions();
        let labels = img.into_raw();
        let top = labels.iter().copied().max().unwrap_or(0).max(args.class_id);
        (labels, h as usize, w as usize, top)
    } else {
        let mask = load_mask(&args.mask)?;
        let top = mask.classes.keys().copied().max().unwrap_or(0);
        let s = mask.shape;
        (mask.slice(args.slice)?.to_vec(), s.height, s.width, top)
    };
    let view = SliceView::new(&labels, height, width, num_classes)?;
    let prompt = simulate_points(&view, args.class_id, args.n, args.seed, args.connectivity)?;
    println!("{}", serde_json::to_string_pretty(&prompt.points)?);
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let lora = match &args.lora {
        Some(p) => Some(load_lora(p, &loaded.model.config)?),
        None => loaded.lora,
    };
    let volume = load_volume(&args.volume)?;
    let reference = args.reference.as_deref().map(load_mask).transpose()?;
    let mode = match (args.clicks, &reference) {
        (Some(n), Some(r)) => PredictionMode::SimulatedClicks {
            n,
            seed: args.seed,
            reference: r,
            connectivity: args.connectivity,
        },
        _ => PredictionMode::Automatic,
    };
    let mask = predict_volume(&loaded.model, lora.as_ref(), &volume, mode)?;

    let id = &volume.volume_id;
    let (h, w) = (volume.shape.height, volume.shape.width);
    let masks_dir = args.out.join("masks");
    let overlay_dir = args.out.join("overlays");
    fs::create_dir_all(&masks_dir)?;
    fs::create_dir_all(&overlay_dir)?;
    save_mask(&mask, args.out.join(format!("{id}.json")))?;
    for k in 0..volume.shape.depth {
        let labels = mask.slice(k)?;
        let name = format!("{id}_{k:03}.png");
        raster::gray_image(labels, w, h)?.save(masks_dir.join(&name))?;
        let gray = raster::gray_u8(volume.slice(k)?);
        raster::overlay(&gray, labels, w, h, 0.5).save(overlay_dir.join(&name))?;
    }
    println!("wrote {} slices of {id} to {}", volume.shape.depth, args.out.display());
    Ok(())
}
