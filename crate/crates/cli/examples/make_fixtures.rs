//! Regenerates the bundled fixtures: `cargo run -p atlas-cli --example make_fixtures [dir]`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};

use atlas_core::corpus::{save_embeddings, write_metadata, Corpus, EmbeddingMatrix, MetadataRecord};
use atlas_core::topology::build_knn_graph;
use rand::Rng;
use serde_json::json;
use support::*;

fn save(dir: &Path, c: &Corpus) {
    fs::create_dir_all(dir).unwrap();
    let rows: Vec<Vec<f32>> = (0..c.len()).map(|i| c.vector(i).to_vec()).collect();
    save_embeddings(&EmbeddingMatrix::from_rows(&rows).unwrap(), dir.join("embeddings.skmb")).unwrap();
    let mut meta = Vec::new();
    write_metadata(c.records(), &mut meta).unwrap();
    fs::write(dir.join("metadata.jsonl"), meta).unwrap();
}

fn pretty(path: PathBuf, v: serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(&v).unwrap() + "\n").unwrap();
}

fn unit(g: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian(g, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Three datasets over two release years with planted label, skin-type, sex
/// and age directions and sparse metadata.
fn synthetic() -> Corpus {
    let d = 16;
    let mut g = rng(2024);
    let labels = [("eczema", "L20.9"), ("psoriasis", "L40.0"), ("melanoma", "C43.9"), ("acne", "L70.0")];
    let label_dir: Vec<Vec<f64>> = labels.iter().map(|_| unit(&mut g, d)).collect();
    let fst_dir: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut g, d)).collect();
    let sex_dir = unit(&mut g, d);
    let age_dir = unit(&mut g, d);
    let datasets = [
        ("clinic-a", 2020, 90, "North America", "clinical"),
        ("clinic-b", 2020, 70, "Europe", "dermoscopic"),
        ("atlas-c", 2021, 60, "South America", "clinical"),
    ];
    let ds_dir: Vec<Vec<f64>> = datasets.iter().map(|_| unit(&mut g, d)).collect();
    let fst_weights = [0.16, 0.32, 0.30, 0.16, 0.04, 0.02];
    let regions = ["hand", "face", "trunk", "leg"];
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (di, &(name, year, n, origin, modality)) in datasets.iter().enumerate() {
        for i in 0..n {
            let li = g.random_range(0..labels.len());
            let u: f64 = g.random();
            let fst = 1 + fst_weights
                .iter()
                .scan(0.0, |acc, w| {
                    *acc += w;
                    Some(*acc)
                })
                .position(|c| u < c)
                .unwrap_or(5);
            let female = g.random_bool(0.5);
            let age: f64 = g.random_range(2.0..85.0);
            let noise = gaussian(&mut g, d);
            let v: Vec<f64> = (0..d)
                .map(|j| {
                    2.0 * label_dir[li][j]
                        + 1.2 * fst_dir[fst - 1][j]
                        + if female { 0.8 } else { -0.8 } * sex_dir[j]
                        + (age / 40.0 - 1.0) * age_dir[j]
                        + 0.6 * ds_dir[di][j]
                        + 0.15 * noise[j]
                })
                .collect();
            rows.push(v);
            let keep = |g: &mut rand_chacha::ChaCha8Rng, p: f64| g.random_bool(p);
            records.push(MetadataRecord {
                id: format!("{name}-{i:03}"),
                dataset: name.to_string(),
                year: Some(year),
                label: Some(labels[li].0.to_string()),
                icd: Some(labels[li].1.to_string()),
                fst: keep(&mut g, 0.6).then_some(fst as u8),
                age: keep(&mut g, 0.5).then_some(age.round()),
                gender: keep(&mut g, 0.7).then(|| if female { "female" } else { "male" }.to_string()),
                origin: keep(&mut g, 0.4).then(|| origin.to_string()),
                body_region: keep(&mut g, 0.5).then(|| regions[li].to_string()),
                modality: Some(modality.to_string()),
            });
        }
    }
    corpus(&rows, records)
}

/// 30 jittered points on a circle lifted off the origin; labels name the half-plane.
fn circle_fixture() -> Corpus {
    let rows: Vec<Vec<f64>> = circle(30, 1.0, 0.3, 7).into_iter().map(|p| vec![p[0], p[1], 1.5, 0.0]).collect();
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, p)| MetadataRecord {
            label: Some(if p[0] > 0.0 { "nail disease".into() } else { "acne".into() }),
            body_region: Some("hand".into()),
            ..rec(&format!("c{i:02}"), "circle")
        })
        .collect();
    corpus(&rows, records)
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));

    let syn = synthetic();
    let syn_dir = root.join("synthetic");
    save(&syn_dir, &syn);
    pretty(
        syn_dir.join("config.json"),
        json!({
            "embeddings_path": "embeddings.skmb",
            "metadata_path": "metadata.jsonl",
            "seed": 42,
            "similarity_pca_dims": 8,
            "density_pca_dims": 4,
            "gmm_K": 3,
            "graph_k": 8,
            "k_b": 8,
            "holes_reduce_to": 8,
            "retrieval_k": [1, 5, 10],
            "icd_blocks": "../icd_blocks.json",
            "baselines": "../baselines.json",
            "orphan_before": 2021
        }),
    );

    let circ = circle_fixture();
    let circ_dir = root.join("circle");
    save(&circ_dir, &circ);
    pretty(
        circ_dir.join("config.json"),
        json!({
            "embeddings_path": "embeddings.skmb",
            "metadata_path": "metadata.jsonl",
            "graph_k": 2,
            "k_b": 3,
            "k_top_holes": 3,
            "holes_distance": "corrected"
        }),
    );
    // Golden value from the dense-pseudoinverse resistance oracle and the full
    // boundary-matrix reduction, on the rows as stored.
    let (reloaded, _) = Corpus::load(circ_dir.join("embeddings.skmb"), circ_dir.join("metadata.jsonl")).unwrap();
    let pts: Vec<Vec<f64>> =
        (0..reloaded.len()).map(|i| reloaded.vector(i).iter().map(|&x| x as f64).collect()).collect();
    let graph = build_knn_graph(&pts, 2).unwrap();
    let edges: Vec<(usize, usize)> = graph.edges();
    let naive = resistance_oracle(pts.len(), &edges);
    let mut corrected = corrected_oracle(&naive, pts.len(), &edges);
    corrected.iter_mut().for_each(|v| *v = v.max(0.0));
    let pairs = naive_h1(&corrected);
    let mut pers: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
    pers.sort_by(|a, b| b.total_cmp(a));
    pretty(
        circ_dir.join("golden.json"),
        json!({
            "distance": "corrected",
            "graph_k": 2,
            "n_pairs": pairs.len(),
            "top_persistence": pers[0],
            "runner_up_persistence": pers.get(1).copied().unwrap_or(0.0),
        }),
    );

    pretty(
        root.join("icd_blocks.json"),
        json!([
            {"start": "C43", "end": "C44", "name": "Melanoma and other malignant neoplasms of skin"},
            {"start": "L20", "end": "L30", "name": "Dermatitis and eczema"},
            {"start": "L40", "end": "L45", "name": "Papulosquamous disorders"},
            {"start": "L60", "end": "L75", "name": "Disorders of skin appendages"}
        ]),
    );
    pretty(
        root.join("baselines.json"),
        json!([
            {
                "field": "fst_group",
                "bins": ["I-II", "III-IV", "V-VI"],
                "baseline_fractions": [0.159, 0.403, 0.438],
                "source_note": "Global dermatology-visit baseline: FST V-VI 43.8%, FST III-VI 84.1% (III-IV is the difference)."
            },
            {
                "field": "age_bin",
                "bins": ["0-17", "18-29", "30-49", "50-69", "70+"],
                "baseline_fractions": [0.312, 0.190, 0.272, 0.170, 0.056],
                "source_note": "0-17 is the published 31.2% world-population share; the other bins are rounded approximations of the UN world age structure."
            }
        ]),
    );
    println!("fixtures written to {}", root.display());
}
