// Pipeline stage diagnostics on the synthetic sphere fixture.

use svrecon::assoc::AssociationIndex;
use svrecon::config::{Profile, TrainConfig};
use svrecon::field::grad_center;
use svrecon::render::learning_thickness;
use svrecon::synth::{self, Shape};

fn mesh_stats(octree: &svrecon::lattice::OctreeState, level: u8, label: &str) {
    let index = AssociationIndex::rebuild(octree, level).unwrap();
    let outside = 2.0 * octree.bounds.cell_size(level);
    let mesh = svrecon::meshx::marching_cubes(octree, &index, level, outside).unwrap();
    if mesh.is_empty() {
        println!("{label}: EMPTY mesh");
        return;
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for v in &mesh.vertices {
        let e = ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs();
        sum += e;
        max = max.max(e);
    }
    println!(
        "{label}: {} verts, {} tris, mean radial {:.5}, max {:.5}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        sum / mesh.vertices.len() as f64,
        max
    );
}

fn band_eik(octree: &svrecon::lattice::OctreeState, s: f64, label: &str) {
    let band = 0.5 * learning_thickness(s);
    let mut residuals = Vec::new();
    for v in octree.leaves() {
        if v.uniform_sign() && v.min_abs_geo() > band {
            continue;
        }
        let g = grad_center(v, &octree.bounds);
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        residuals.push((n - 1.0).abs());
    }
    println!(
        "{label}: band voxels {}, mean |grad-1| {:.4}",
        residuals.len(),
        residuals.iter().sum::<f64>() / residuals.len().max(1) as f64
    );
}

fn main() {
    let dir = std::env::temp_dir().join("svrecon_dbg_scene");
    let _ = std::fs::remove_dir_all(&dir);
    let params = synth::SceneParams {
        shape: Shape::Sphere { radius: 1.0 },
        views: 16,
        seed: 11,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let meta = synth::generate_scene(&dir, &params).unwrap();
    println!("scene generated in {:?}", t0.elapsed());

    let cams_json = svrecon::io::read_cameras_json(&dir.join("cameras.json")).unwrap();
    let mut cameras = Vec::new();
    let mut pointmaps = svrecon::geoinit::PointMapSet::default();
    for (i, view) in cams_json.views.iter().enumerate() {
        let cam = view.camera(std::path::Path::new("cameras.json")).unwrap();
        let (points, confidence) =
            svrecon::io::read_pointmap_ply(&dir.join(format!("pointmaps/view_{i:04}.ply"))).unwrap();
        pointmaps.views.push(svrecon::geoinit::PointMapView {
            width: cam.width,
            height: cam.height,
            points,
            confidence,
        });
        cameras.push(cam);
    }
    let t0 = std::time::Instant::now();
    let (octree, report) = svrecon::geoinit::run_init(
        meta.bounds,
        8,
        &cameras,
        None,
        &pointmaps,
        &svrecon::geoinit::InitParams::default(),
    )
    .unwrap();
    println!(
        "init in {:?}: {} voxels, carve flipped {} visible + {} outside of {} nodes",
        t0.elapsed(),
        octree.len(),
        report.carve.flipped_visible,
        report.carve.flipped_outside,
        report.carve.total_nodes
    );
    mesh_stats(&octree, 6, "after init");
    let s0 = svrecon::render::initial_sharpness(meta.bounds.cell_size(6));
    band_eik(&octree, s0, "after init");

    let cfg = TrainConfig::for_profile(Profile::Synthetic);
    let scene = svrecon::trainer::SceneData::load(&dir, 0.1).unwrap();
    let mut trainer = svrecon::trainer::Trainer::new(octree, cfg).unwrap();
    let t0 = std::time::Instant::now();
    let milestones = [1u64, 50, 250, 500, 1000, 1250, 1500, 2000];
    while trainer.iter < trainer.cfg.iters {
        let report = trainer.step_once(&scene).unwrap();
        if milestones.contains(&trainer.iter) {
            println!(
                "iter {:>5}: photo {:.5} mask {:.4} eik {:>9.2} smooth {:>9.1} normal {:.4} total {:.4} vox {} s {:.1} ({:?} elapsed)",
                trainer.iter,
                report.photo,
                report.mask,
                report.eik,
                report.smooth,
                report.normal,
                report.total,
                trainer.octree.len(),
                trainer.sched.s(),
                t0.elapsed()
            );
        }
    }
    println!("train in {:?}", t0.elapsed());
    mesh_stats(&trainer.octree, 7, "after train");
    band_eik(&trainer.octree, trainer.sched.s(), "after train");
}
