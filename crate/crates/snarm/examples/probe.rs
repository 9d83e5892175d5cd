use snarm::bank::{build_raw_pool, compute_inter_grid, coreset_select};
use snarm::pipeline::config::Config;
use snarm::pipeline::dataset::{load_manifest, load_mask};
use snarm::pipeline::run::{compute_features, create_backend, bank_seed};
use snarm::train::{synthesize_anomaly, TrainSample};

fn main() {
    let cfg = Config::load(std::path::Path::new("crates/snarm/configs/desk.toml")).unwrap();
    let manifest = load_manifest(std::path::Path::new("/tmp/snarm_e2e/data")).unwrap();
    let backend = create_backend(&cfg).unwrap();
    let cat = "cat00";
    let mut grids = Vec::new();
    for e in manifest.train_entries(cat) {
        grids.push(compute_features(&cfg, backend.as_ref(), &e.path).unwrap());
    }
    let pool = build_raw_pool(&grids).unwrap();
    let bank = coreset_select(&pool, 512.min(pool.len()), bank_seed(cfg.run.seed)).unwrap();

    // clean image residual stats
    let rg = compute_inter_grid(&grids[0], &bank, 2, 3).unwrap();
    let mean_clean: f64 = rg.grid.data.iter().sum::<f64>() / rg.grid.data.len() as f64;
    let max_clean = rg.grid.data.iter().cloned().fold(0.0f64, f64::max);
    println!("clean train image: mean res {mean_clean:.5} max {max_clean:.5}");

    // synthetic anomaly residual stats (current noise scale)
    let syn = synthesize_anomaly(&TrainSample::normal(grids[1].clone()), &[], 99).unwrap();
    let rg = compute_inter_grid(&syn.features, &bank, 2, 3).unwrap();
    let geo = syn.features.geometry;
    let mut inside = vec![];
    let mut outside = vec![];
    for i in 0..8 { for j in 0..8 {
        let (r0, _, c0, _) = geo.rect(i, j);
        let m: f64 = rg.grid.cell(i, j).iter().sum::<f64>() / 32.0;
        if syn.mask.at(r0, c0) { inside.push(m) } else { outside.push(m) }
    }}
    println!("synthetic: inside mean {:.5}, outside mean {:.5}",
        inside.iter().sum::<f64>() / inside.len() as f64,
        outside.iter().sum::<f64>() / outside.len() as f64);

    // real test defect residual stats
    for e in manifest.test_entries(cat).iter().filter(|e| e.label).take(2) {
        let feats = compute_features(&cfg, backend.as_ref(), &e.path).unwrap();
        let mask = load_mask(e.mask_path.as_ref().unwrap()).unwrap();
        let rg = compute_inter_grid(&feats, &bank, 2, 3).unwrap();
        let geo = feats.geometry;
        let mut inside = vec![];
        let mut outside = vec![];
        for i in 0..8 { for j in 0..8 {
            let (r0, r1, c0, c1) = geo.rect(i, j);
            let mut frac = 0.0;
            for pi in r0..r1 { for pj in c0..c1 { if mask.at(pi, pj) { frac += 1.0; } } }
            frac /= ((r1 - r0) * (c1 - c0)) as f64;
            let m: f64 = rg.grid.cell(i, j).iter().sum::<f64>() / 32.0;
            if frac > 0.3 { inside.push(m) } else if frac == 0.0 { outside.push(m) }
        }}
        println!("test {}: defect-cell mean {:.5} ({} cells), clean-cell mean {:.5}",
            e.image_id(),
            inside.iter().sum::<f64>() / inside.len().max(1) as f64, inside.len(),
            outside.iter().sum::<f64>() / outside.len().max(1) as f64);
    }
}
