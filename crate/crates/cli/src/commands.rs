//! The optimising subcommands and `inspect`.
//!
//! Each command first resolves and checks everything that can be wrong with
//! the request (usage errors), then runs its cells and writes artifacts
//! (runtime errors).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use image::RgbImage;
use log::info;
use mapinv_core::codeops::{gram_descriptor, sample_simplex, style_descriptor};
use mapinv_core::inversion::{
    build_fmi_objective, build_gram_objective, build_pmci_objective, build_random_objective, StyleSetup,
};
use mapinv_core::{optimize, Backbone, ImageBuffer, LayerId, Objective, RunManifest};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    parse_indices, parse_layers, Common, FmiConfig, RandomStyleConfig, StyleMode, StyleTransferConfig, WeightsSource,
};
use crate::grid::GridSpec;
use crate::inputs::{self, Input};
use crate::Failure;

/// Top-level record written to `manifest.json`. Its `config` field is
/// accepted back by `--config`.
#[derive(Debug, Serialize)]
pub struct CommandManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub weights: String,
    pub weights_checksum: Option<String>,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub grid: GridSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descriptors: Option<serde_json::Value>,
    pub runs: Vec<RunManifest>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

pub fn load_backbone(source: &WeightsSource) -> Result<Backbone> {
    match source {
        WeightsSource::File(p) => {
            info!("loading weights from {}", p.display());
            Backbone::load(p).with_context(|| format!("loading weights {}", p.display()))
        }
        WeightsSource::Synthetic(seed) => Ok(Backbone::vgg19_synthetic(*seed)),
        WeightsSource::Toy(seed) => Ok(Backbone::toy(*seed)),
    }
}

fn check_layers(b: &Backbone, layers: &[LayerId], height: usize, width: usize) -> Result<()> {
    for &l in layers {
        if !l.is_relu() {
            bail!("layer {l} is not a relu layer");
        }
        b.output_shape(l, height, width)?;
    }
    Ok(())
}

/// One (layer, filter-or-seed) job.
struct Cell {
    layer: LayerId,
    /// Filter index or reallocation seed.
    key: u64,
    stem: String,
    trace: String,
}

impl Cell {
    fn new(command: &str, layer: LayerId, key: u64) -> Self {
        Self {
            layer,
            key,
            stem: format!("{command}_{layer}_{key}"),
            trace: format!("trace_{layer}_{key}.csv"),
        }
    }
}

struct Finished {
    manifest: RunManifest,
    image: RgbImage,
}

type Describe<'f> = Box<dyn Fn(&[Finished]) -> Result<serde_json::Value> + Sync + 'f>;

struct Session<'a> {
    command: &'static str,
    common: &'a Common,
    backbone: Backbone,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

impl Session<'_> {
    fn out_dir(&self) -> &Path {
        &self.common.out
    }

    /// Optimises one cell and writes its image and trace.
    fn run_cell(&self, cell: &Cell, obj: &Objective, extra_seeds: &[u64]) -> Result<Finished> {
        let cfg = self.common.optimizer_config()?;
        info!("{}: optimising", cell.stem);
        let result = optimize(&self.backbone, obj, &cfg)?;
        let png = format!("{}.png", cell.stem);
        result.image.save_png(self.out_dir().join(&png))?;
        result.write_trace_csv(self.out_dir().join(&cell.trace))?;
        info!(
            "{}: loss {:.4e} -> {:.4e} in {} iterations",
            cell.stem,
            result.initial_loss(),
            result.final_loss(),
            result.trace.len() - 1
        );
        let mut manifest = result.manifest;
        manifest.command = self.command.to_string();
        manifest.config = self.config.clone();
        manifest.inputs = self.inputs.clone();
        manifest.seeds.extend_from_slice(extra_seeds);
        manifest.outputs = vec![png, cell.trace.clone()];
        Ok(Finished {
            manifest,
            image: result.image.to_rgb8(),
        })
    }

    /// Runs `cells` (possibly concurrently) and writes the grid and manifest.
    fn run_all<F>(
        &self,
        cells: Vec<Cell>,
        rows: Vec<String>,
        cols: Vec<String>,
        seeds: Vec<u64>,
        descriptors: Option<Describe<'_>>,
        job: F,
    ) -> Result<()>
    where
        F: Fn(&Cell) -> Result<Finished> + Sync,
    {
        let started = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.common.jobs)
            .build()
            .context("starting worker pool")?;
        let finished: Vec<Finished> = pool.install(|| {
            cells
                .par_iter()
                .map(|c| job(c).with_context(|| format!("run {}", c.stem)))
                .collect::<Result<Vec<_>>>()
        })?;

        let grid = GridSpec {
            rows,
            cols,
            cell: finished[0].image.dimensions(),
            labels: cells.iter().map(|c| format!("{}.png", c.stem)).collect(),
        };
        let images: Vec<RgbImage> = finished.iter().map(|f| f.image.clone()).collect();
        grid.render(&images)?.save(self.out_dir().join("grid.png"))?;

        let mut outputs: Vec<String> = finished.iter().flat_map(|f| f.manifest.outputs.clone()).collect();
        outputs.push("grid.png".into());
        outputs.push("manifest.json".into());
        let descriptors = descriptors.map(|d| d(&finished)).transpose()?;
        let manifest = CommandManifest {
            command: self.command.to_string(),
            config: self.config.clone(),
            weights: self.common.weights.clone(),
            weights_checksum: self.backbone.checksum().map(str::to_string),
            seeds,
            inputs: self.inputs.clone(),
            grid,
            descriptors,
            runs: finished.into_iter().map(|f| f.manifest).collect(),
            outputs,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        fs::write(
            self.out_dir().join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        info!("wrote {} runs to {}", manifest.runs.len(), self.out_dir().display());
        Ok(())
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn load_input(path: &Path, size: u32) -> Result<Input> {
    inputs::load(path, size)
}

pub fn fmi(cfg: FmiConfig) -> std::result::Result<(), Failure> {
    let c = &cfg.common;
    let layers = parse_layers(&cfg.layers).map_err(Failure::Usage)?;
    let filters: Vec<usize> = parse_indices(&cfg.filters, "filter").map_err(Failure::Usage)?;
    let setup = || -> Result<_> {
        if filters.is_empty() {
            bail!("no filters given");
        }
        let input = load_input(&cfg.image, c.size)?;
        let backbone = load_backbone(&c.weights_source())?;
        let (h, w) = (input.image.height(), input.image.width());
        check_layers(&backbone, &layers, h, w)?;
        for &l in &layers {
            let channels = backbone.channels(l)?;
            if let Some(&bad) = filters.iter().find(|&&f| f >= channels) {
                bail!(mapinv_core::Error::ChannelOutOfRange {
                    layer: l.to_string(),
                    index: bad,
                    channels
                });
            }
        }
        Ok((input, backbone))
    };
    let (input, backbone) = setup().map_err(Failure::Usage)?;
    prepare_out(&c.out).map_err(Failure::Usage)?;

    let session = Session {
        command: "fmi",
        common: c,
        backbone,
        config: serde_json::to_value(&cfg).map_err(|e| Failure::Runtime(e.into()))?,
        inputs: BTreeMap::from([("image".to_string(), input.sha256.clone())]),
    };
    let cells: Vec<Cell> = layers
        .iter()
        .flat_map(|&l| filters.iter().map(move |&f| Cell::new("fmi", l, f as u64)))
        .collect();
    let priors = c.priors();
    session
        .run_all(
            cells,
            layers.iter().map(ToString::to_string).collect(),
            filters.iter().map(ToString::to_string).collect(),
            vec![c.seed],
            None,
            |cell| {
                let obj = build_fmi_objective(&session.backbone, &input.image, cell.layer, cell.key as usize, priors)?;
                session.run_cell(cell, &obj, &[])
            },
        )
        .map_err(Failure::Runtime)
}

pub fn random_style(cfg: RandomStyleConfig) -> std::result::Result<(), Failure> {
    let c = &cfg.common;
    let layers = parse_layers(&cfg.layers).map_err(Failure::Usage)?;
    let seeds: Vec<u64> = parse_indices(&cfg.seeds, "seed").map_err(Failure::Usage)?;
    let setup = || -> Result<_> {
        if seeds.is_empty() {
            bail!("no seeds given");
        }
        let input = load_input(&cfg.image, c.size)?;
        let backbone = load_backbone(&c.weights_source())?;
        check_layers(&backbone, &layers, input.image.height(), input.image.width())?;
        Ok((input, backbone))
    };
    let (input, backbone) = setup().map_err(Failure::Usage)?;
    prepare_out(&c.out).map_err(Failure::Usage)?;

    let session = Session {
        command: "random-style",
        common: c,
        backbone,
        config: serde_json::to_value(&cfg).map_err(|e| Failure::Runtime(e.into()))?,
        inputs: BTreeMap::from([("image".to_string(), input.sha256.clone())]),
    };
    let cells: Vec<Cell> = layers
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| Cell::new("random-style", l, s)))
        .collect();
    let priors = c.priors();
    let mut all_seeds = vec![c.seed];
    all_seeds.extend(&seeds);
    session
        .run_all(
            cells,
            layers.iter().map(ToString::to_string).collect(),
            seeds.iter().map(ToString::to_string).collect(),
            all_seeds,
            None,
            |cell| {
                let v = sample_simplex(session.backbone.channels(cell.layer)?, cell.key)?;
                let obj = build_random_objective(&session.backbone, &input.image, cell.layer, &v, priors)?;
                session.run_cell(cell, &obj, &[cell.key])
            },
        )
        .map_err(Failure::Runtime)
}

fn descriptors_json(
    b: &Backbone,
    img: &ImageBuffer,
    layers: &[LayerId],
    mode: StyleMode,
) -> Result<BTreeMap<String, serde_json::Value>> {
    let codes = b.extract_codes(img, layers)?;
    codes
        .into_iter()
        .map(|(l, code)| {
            let v = match mode {
                StyleMode::ChannelSum => serde_json::to_value(style_descriptor(&code))?,
                StyleMode::Gram => serde_json::to_value(gram_descriptor(&code))?,
            };
            Ok((l.to_string(), v))
        })
        .collect()
}

pub fn style_transfer(cfg: StyleTransferConfig) -> std::result::Result<(), Failure> {
    let c = &cfg.common;
    let setup = || -> Result<_> {
        let content_layer: LayerId = cfg.content_layer.parse()?;
        let style_layers = parse_layers(&cfg.style_layers)?;
        let style_dims = cfg.style_size.as_deref().map(inputs::parse_dims).transpose()?;
        let content = load_input(&cfg.content, c.size)?;
        let area = (content.image.height() * content.image.width()) as u64;
        let style = inputs::load_style(&cfg.style, style_dims, area)?;
        let backbone = load_backbone(&c.weights_source())?;
        check_layers(
            &backbone,
            &[content_layer],
            content.image.height(),
            content.image.width(),
        )?;
        check_layers(&backbone, &style_layers, style.image.height(), style.image.width())?;
        check_layers(&backbone, &style_layers, content.image.height(), content.image.width())?;
        let setup = StyleSetup {
            content_layer,
            style_layers,
            alpha: cfg.alpha,
            beta: cfg.beta,
            normalize: cfg.normalize_style,
        };
        let obj = match cfg.mode {
            StyleMode::ChannelSum => build_pmci_objective(&backbone, &content.image, &style.image, &setup, c.priors())?,
            StyleMode::Gram => build_gram_objective(&backbone, &content.image, &style.image, &setup, c.priors())?,
        };
        Ok((content, style, backbone, setup, obj))
    };
    let (content, style, backbone, setup, obj) = setup().map_err(Failure::Usage)?;
    prepare_out(&c.out).map_err(Failure::Usage)?;

    let session = Session {
        command: "style-transfer",
        common: c,
        backbone,
        config: serde_json::to_value(&cfg).map_err(|e| Failure::Runtime(e.into()))?,
        inputs: BTreeMap::from([
            ("content".to_string(), content.sha256.clone()),
            ("style".to_string(), style.sha256.clone()),
        ]),
    };
    let cell = Cell::new("style-transfer", setup.content_layer, c.seed);
    let describe = |done: &[Finished]| -> Result<serde_json::Value> {
        let output = ImageBuffer::from_rgb8(&done[0].image);
        Ok(serde_json::json!({
            "mode": cfg.mode,
            "style_size": [style.image.width(), style.image.height()],
            "style": descriptors_json(&session.backbone, &style.image, &setup.style_layers, cfg.mode)?,
            "output": descriptors_json(&session.backbone, &output, &setup.style_layers, cfg.mode)?,
        }))
    };
    session
        .run_all(
            vec![cell],
            vec![setup.content_layer.to_string()],
            vec![c.seed.to_string()],
            vec![c.seed],
            Some(Box::new(describe)),
            |cell| session.run_cell(cell, &obj, &[]),
        )
        .map_err(Failure::Runtime)
}

#[derive(Debug, Serialize)]
struct LayerReport {
    layer: String,
    shape: [usize; 3],
    total: f64,
    min: f64,
    max: f64,
    channel_sums: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gram: Option<mapinv_core::GramDescriptor>,
}

pub struct InspectRequest {
    pub image: PathBuf,
    pub weights: WeightsSource,
    pub size: u32,
    pub layers: String,
    pub gram: bool,
    pub out: Option<PathBuf>,
}

pub fn inspect(req: InspectRequest) -> std::result::Result<(), Failure> {
    let setup = || -> Result<_> {
        let input = load_input(&req.image, req.size)?;
        let backbone = load_backbone(&req.weights)?;
        let layers = if req.layers == "all" {
            backbone.relu_layers()
        } else {
            parse_layers(&req.layers)?
        };
        check_layers(&backbone, &layers, input.image.height(), input.image.width())?;
        Ok((input, backbone, layers))
    };
    let (input, backbone, layers) = setup().map_err(Failure::Usage)?;
    let run = || -> Result<()> {
        let mut codes = backbone.extract_codes(&input.image, &layers)?;
        let reports: Vec<LayerReport> = layers
            .iter()
            .map(|l| {
                let code = codes.remove(l).expect("requested layer extracted");
                let v = code.values();
                LayerReport {
                    layer: l.to_string(),
                    shape: {
                        let (c, h, w) = code.shape();
                        [c, h, w]
                    },
                    total: code.total(),
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    channel_sums: style_descriptor(&code).sums,
                    gram: req.gram.then(|| gram_descriptor(&code)),
                }
            })
            .collect();
        let report = serde_json::json!({
            "image": {
                "path": req.image,
                "sha256": input.sha256,
                "height": input.image.height(),
                "width": input.image.width(),
            },
            "weights_checksum": backbone.checksum(),
            "layers": reports,
        });
        let text = serde_json::to_string_pretty(&report)?;
        match &req.out {
            Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
            None => println!("{text}"),
        }
        Ok(())
    };
    run().map_err(Failure::Runtime)
}
