// Carving decision probe on hand-picked nodes.

use svrecon::synth::{self, Shape};

fn main() {
    let dir = std::env::temp_dir().join("svrecon_dbg_scene");
    let meta = synth::read_scene_meta(&dir).unwrap();
    let cams_json = svrecon::io::read_cameras_json(&dir.join("cameras.json")).unwrap();
    let mut cameras = Vec::new();
    let mut all_points = Vec::new();
    for (i, view) in cams_json.views.iter().enumerate() {
        let cam = view.camera(std::path::Path::new("cameras.json")).unwrap();
        let (points, conf) =
            svrecon::io::read_pointmap_ply(&dir.join(format!("pointmaps/view_{i:04}.ply"))).unwrap();
        for (p, c) in points.iter().zip(&conf) {
            if *c >= 0.1 && meta.bounds.contains(*p) {
                all_points.push(*p);
            }
        }
        cameras.push(cam);
    }
    println!("{} cameras, {} surface points", cameras.len(), all_points.len());

    let probes: [[f64; 3]; 6] = [
        [1.5, 0.0, 0.0],
        [0.0, 0.0, 1.5],
        [-1.5, 0.3, 0.2],
        [0.0, -1.7, 0.0],
        [0.5, 0.5, 0.5], // inside-ish? r = 0.87 < 1: inside the sphere
        [1.9, 1.9, 1.9], // cube corner region
    ];
    let margin = meta.bounds.cell_size(6) * 0.25;
    for p in probes {
        let truth = synth::analytic_sdf(Shape::Sphere { radius: 1.0 }, [0.0; 3], p);
        let mut in_any = false;
        let mut flipped = false;
        let mut detail = String::new();
        for (ci, cam) in cameras.iter().enumerate() {
            let Some((u, v, depth)) = cam.project(p) else { continue };
            if !cam.in_image(u, v) {
                continue;
            }
            in_any = true;
            // nearest point depth binned at 1/8 resolution
            let factor = 8u32;
            let (bu, bv) = (u as u32 / factor, v as u32 / factor);
            let mut bin_min = f64::INFINITY;
            for q in &all_points {
                if let Some((qu, qv, qd)) = cam.project(*q) {
                    if cam.in_image(qu, qv) && (qu as u32 / factor, qv as u32 / factor) == (bu, bv) {
                        bin_min = bin_min.min(qd);
                    }
                }
            }
            if depth < bin_min - margin {
                flipped = true;
                detail = format!("cam {ci}: depth {depth:.3} < bin {bin_min:.3}");
                break;
            } else if ci < 3 {
                detail += &format!("cam {ci}: depth {depth:.3} !< bin {bin_min:.3}; ");
            }
        }
        println!(
            "node {p:?}: sdf {truth:+.3} -> in_any {in_any} flipped {flipped}   {detail}"
        );
    }
}
