//! Seeded synthetic inputs for the benchmarks.

use maplabel::{BoundingBox, DetectedText, Landmark, LandmarkType, MapRecord, Point, Polygon};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "North", "Beach", "Library", "Tower", "Square", "Market", "Garden", "Museum", "Station", "Hall", "Park", "Street",
];

/// A `width` x `height` map with `n` rectangular landmarks of random type.
pub fn synthetic_map(seed: u64, n: usize, width: u32, height: u32) -> MapRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = format!("bench-{seed}");
    let landmarks = (0..n)
        .map(|i| {
            let w = rng.random_range(10.0..80.0);
            let h = rng.random_range(10.0..60.0);
            let x = rng.random_range(0.0..(width as f64 - w));
            let y = rng.random_range(0.0..(height as f64 - h));
            let name = format!("{} {}", WORDS[rng.random_range(0..WORDS.len())], WORDS[rng.random_range(0..WORDS.len())]);
            Landmark {
                id: format!("{id}-way-{i}"),
                name,
                kind: LandmarkType::ALL[rng.random_range(0..LandmarkType::ALL.len())],
                boundary: Polygon::new(vec![Point::new(x, y), Point::new(x + w, y), Point::new(x + w, y + h), Point::new(x, y + h)])
                    .expect("non-empty"),
                map_id: id.clone(),
            }
        })
        .collect();
    MapRecord {
        id,
        city: "Bench".into(),
        image_width: width,
        image_height: height,
        labeled_image_path: "labeled.png".into(),
        unlabeled_image_path: "unlabeled.png".into(),
        landmarks,
    }
}

/// Words near each landmark: the name tokens plus `noise` random distractors.
pub fn synthetic_texts(map: &MapRecord, seed: u64, noise: usize) -> Vec<DetectedText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let push = |text: &str, x: f64, y: f64, out: &mut Vec<DetectedText>| {
        let x = x.clamp(0.0, map.image_width as f64 - 40.0);
        let y = y.clamp(0.0, map.image_height as f64 - 12.0);
        out.push(DetectedText {
            text: text.to_string(),
            bbox: BoundingBox::from_coords(x, y, x + 40.0, y + 12.0),
            map_id: map.id.clone(),
            confidence: 0.9,
        });
    };
    for lm in &map.landmarks {
        let b = lm.bbox();
        for (i, token) in lm.name.split_whitespace().enumerate() {
            push(token, b.min().x + 42.0 * i as f64, b.min().y - 14.0, &mut out);
        }
    }
    for _ in 0..noise {
        let word = WORDS[rng.random_range(0..WORDS.len())];
        let x = rng.random_range(0.0..map.image_width as f64);
        let y = rng.random_range(0.0..map.image_height as f64);
        push(word, x, y, &mut out);
    }
    out
}
