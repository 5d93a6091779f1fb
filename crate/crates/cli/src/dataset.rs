//! Dataset directory layout: `manifest.txt` (key=value), plus one FUNT
//! tensor per image under `images/`, `labels_full/`, `labels_client/`.
//! Label maps are stored as f32 tensors holding integral values.

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use funavg_core::funt;
use funavg_core::registry::{ClientId, LabelRegistry};
use funavg_core::rng::{tags, RngState};
use funavg_core::synth::{make_world, mask_labels, split_train_test, ClientDataset, Sample};
use funavg_core::tensor::LabelMap;
use std::collections::BTreeMap;
use std::path::Path;

pub struct GeneratedDataset {
    pub registry: LabelRegistry,
    pub clients: Vec<ClientDataset>,
    pub image_size: usize,
    pub seed: u64,
}

/// Generates every client's data from one run seed: per-client worlds
/// derive their states from (seed, client index), the split from a
/// separate stream, so outputs are schedule independent.
pub fn generate(cfg: &RunConfig, seed: u64) -> Result<GeneratedDataset> {
    let registry = cfg.registry()?;
    let master = RngState::new(seed, 0);
    let world_rng = master.derive(tags::WORLD);
    let split_rng = master.derive(tags::SPLIT);
    let mut clients = Vec::new();
    for (i, cid) in cfg.client_ids().into_iter().enumerate() {
        let n = cfg.data.n_per_client[i];
        let world = make_world(world_rng.derive(i as u64), n, cfg.data.image_size, &registry)?;
        let set: Vec<String> = registry.client_label_list(&cid)?.to_vec();
        let mut masked: Vec<Sample> = world
            .iter()
            .map(|s| mask_labels(s, &set, &registry))
            .collect::<funavg_core::Result<_>>()?;
        if cfg.data.label_jitter {
            for s in &mut masked {
                let jittered = jitter_labels(s.client_labels.as_ref().expect("masked"), i);
                s.client_labels = Some(jittered);
            }
        }
        let (train, test) =
            split_train_test(masked, cfg.data.split_fraction, split_rng.derive(i as u64))?;
        clients.push(ClientDataset { client_id: cid, train, test });
    }
    Ok(GeneratedDataset {
        registry,
        clients,
        image_size: cfg.data.image_size,
        seed,
    })
}

/// Annotation-protocol jitter: even client indices dilate, odd erode
/// every structure mask by one 4-neighborhood step. Ground truth
/// (full_labels) is never touched.
fn jitter_labels(labels: &LabelMap, client_index: usize) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = labels.clone();
    let dilate = client_index % 2 == 0;
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y, x);
            let mut neighbor_nonzero = 0u32;
            let mut neighbor_zero = false;
            for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let nv = labels.get(ny as usize, nx as usize);
                if nv != 0 {
                    neighbor_nonzero = nv;
                } else {
                    neighbor_zero = true;
                }
            }
            if dilate && v == 0 && neighbor_nonzero != 0 {
                out.set(y, x, neighbor_nonzero);
            } else if !dilate && v != 0 && neighbor_zero {
                out.set(y, x, 0);
            }
        }
    }
    out
}

fn sample_id(client: &ClientId, index: usize) -> String {
    format!("{client}_{index:04}")
}

pub fn write_dataset(dir: &Path, ds: &GeneratedDataset, cfg: &RunConfig) -> Result<()> {
    for sub in ["images", "labels_full", "labels_client"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("seed={}\n", ds.seed));
    manifest.push_str(&format!("image_size={}\n", ds.image_size));
    manifest.push_str(&format!("split_fraction={}\n", cfg.data.split_fraction));
    manifest.push_str(&format!("labels={}\n", ds.registry.global_labels().join(",")));
    let client_names: Vec<String> = ds.clients.iter().map(|c| c.client_id.to_string()).collect();
    manifest.push_str(&format!("clients={}\n", client_names.join(",")));
    for c in &ds.clients {
        manifest.push_str(&format!(
            "labels.{}={}\n",
            c.client_id,
            ds.registry.client_label_list(&c.client_id).map_err(CliError::from)?.join(",")
        ));
        manifest.push_str(&format!("n.{}={}\n", c.client_id, c.train.len() + c.test.len()));
    }
    for c in &ds.clients {
        let mut train_ids = Vec::new();
        let mut test_ids = Vec::new();
        for (i, sample) in c.train.iter().chain(c.test.iter()).enumerate() {
            let id = sample_id(&c.client_id, i);
            if i < c.train.len() {
                train_ids.push(id.clone());
            } else {
                test_ids.push(id.clone());
            }
            funt::write_file(&dir.join("images").join(format!("{id}.funt")), &sample.image)
                .map_err(CliError::from)?;
            funt::write_file(
                &dir.join("labels_full").join(format!("{id}.funt")),
                &sample.full_labels.to_tensor(),
            )
            .map_err(CliError::from)?;
            let cl = sample.client_labels.as_ref().ok_or_else(|| {
                CliError::Data(format!("sample {id} lacks client labels"))
            })?;
            funt::write_file(
                &dir.join("labels_client").join(format!("{id}.funt")),
                &cl.to_tensor(),
            )
            .map_err(CliError::from)?;
        }
        manifest.push_str(&format!("train.{}={}\n", c.client_id, train_ids.join(",")));
        manifest.push_str(&format!("test.{}={}\n", c.client_id, test_ids.join(",")));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn manifest_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Data(format!("{}:{}: expected key=value", path.display(), no + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn load_label_map(path: &Path) -> Result<LabelMap> {
    let t = funt::read_file_as::<f32>(path).map_err(CliError::from)?;
    LabelMap::from_tensor(&t).map_err(CliError::from)
}

pub fn read_dataset(dir: &Path) -> Result<GeneratedDataset> {
    let m = manifest_map(&dir.join("manifest.txt"))?;
    let get = |k: &str| -> Result<&String> {
        m.get(k)
            .ok_or_else(|| CliError::Data(format!("manifest.txt missing key '{k}'")))
    };
    let seed: u64 = get("seed")?.parse().map_err(|e| CliError::Data(format!("seed: {e}")))?;
    let image_size: usize = get("image_size")?
        .parse()
        .map_err(|e| CliError::Data(format!("image_size: {e}")))?;
    let labels: Vec<String> = get("labels")?.split(',').map(|s| s.trim().to_string()).collect();
    let client_names: Vec<String> =
        get("clients")?.split(',').map(|s| s.trim().to_string()).collect();
    let mut sets = BTreeMap::new();
    for c in &client_names {
        let set: Vec<String> = get(&format!("labels.{c}"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        sets.insert(ClientId(c.clone()), set);
    }
    let registry = LabelRegistry::new(labels, sets).map_err(CliError::from)?;

    let mut clients = Vec::new();
    for c in &client_names {
        let cid = ClientId(c.clone());
        let load_split = |key: &str| -> Result<Vec<Sample>> {
            let ids = get(key)?;
            let ids: Vec<&str> = ids.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            ids.iter()
                .map(|id| {
                    let image = funt::read_file_as::<f32>(
                        &dir.join("images").join(format!("{id}.funt")),
                    )
                    .map_err(CliError::from)?;
                    let full_labels =
                        load_label_map(&dir.join("labels_full").join(format!("{id}.funt")))?;
                    let client_labels =
                        load_label_map(&dir.join("labels_client").join(format!("{id}.funt")))?;
                    Ok(Sample { image, full_labels, client_labels: Some(client_labels) })
                })
                .collect()
        };
        let train = load_split(&format!("train.{c}"))?;
        let test = load_split(&format!("test.{c}"))?;
        clients.push(ClientDataset { client_id: cid, train, test });
    }
    Ok(GeneratedDataset { registry, clients, image_size, seed })
}
