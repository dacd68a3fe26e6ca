//! Generates each synthetic task, prints a few records and writes one video
//! as PNG frames.

use cotok::ingest::{load_video, synth_dataset, write_frame_dir, Scene, SynthTask};

fn main() -> cotok::Result<()> {
    for task in [SynthTask::FrameColor, SynthTask::TemporalOrder, SynthTask::RepeatCount] {
        let examples = synth_dataset(task, 3, 11)?;
        println!("== {} (answers: {})", task.keyword(), task.answer_set().join(", "));
        for ex in &examples {
            println!("{}", ex.to_line());
        }
        let scene = Scene::generate(task, 11, 0);
        let timeline: String = scene
            .visible
            .iter()
            .map(|s| s.map_or('.', |seg| char::from(b'a' + seg as u8)))
            .collect();
        println!("segments per frame: {timeline}");
    }

    let ex = &synth_dataset(SynthTask::TemporalOrder, 1, 11)?[0];
    let video = load_video(&ex.video, std::path::Path::new("."))?;
    let dir = std::env::temp_dir().join("cotok_example_frames");
    std::fs::create_dir_all(&dir).expect("create dir");
    write_frame_dir(&video, &dir)?;
    println!("\nwrote {} frames to {}", video.frames.len(), dir.display());
    Ok(())
}
