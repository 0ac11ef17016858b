use muvit_core::synthgen::*;
fn main() {
    for seed in [11u64, 22, 33] {
        let p = draw_scene_params(512, seed);
        let s = generate_scene(&p).unwrap();
        let dir = std::path::PathBuf::from(format!("/tmp/scene_{seed}"));
        std::fs::create_dir_all(&dir).unwrap();
        write_preview(&dir, &s).unwrap();
        println!("seed {seed}: rings {}, cells {} (inner {})", s.ring_count, s.cells.len(),
            s.cells.iter().filter(|c| c.3 == 2).count());
    }
}
