//! Procedural scene corpus: small storybook-like images with a character whose
//! face color encodes its identity, plus matching captions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::BoundingBox;
use crate::numerics::Tensor;

pub const IMAGE_SIZE: usize = 32;

/// Named characters and their face colors.
pub const IDENTITIES: [(&str, [f32; 3]); 3] = [
    ("prince", [0.96, 0.58, 0.16]),
    ("pilot", [0.82, 0.22, 0.78]),
    ("king", [0.88, 0.16, 0.16]),
];

pub fn identity_index(name: &str) -> Option<usize> {
    IDENTITIES.iter().position(|(n, _)| *n == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backdrop {
    Day,
    Night,
    Forest,
    Desert,
}

impl Backdrop {
    pub const ALL: [Backdrop; 4] = [
        Backdrop::Day,
        Backdrop::Night,
        Backdrop::Forest,
        Backdrop::Desert,
    ];

    fn phrase(self) -> &'static str {
        match self {
            Backdrop::Day => "in the day",
            Backdrop::Night => "at night",
            Backdrop::Forest => "in the forest",
            Backdrop::Desert => "in the desert",
        }
    }

    fn colors(self) -> ([f32; 3], [f32; 3]) {
        match self {
            Backdrop::Day => ([0.55, 0.78, 0.96], [0.35, 0.65, 0.30]),
            Backdrop::Night => ([0.08, 0.10, 0.28], [0.25, 0.25, 0.30]),
            Backdrop::Forest => ([0.10, 0.35, 0.15], [0.20, 0.45, 0.20]),
            Backdrop::Desert => ([0.95, 0.86, 0.62], [0.93, 0.80, 0.50]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prop {
    Elephant,
    Star,
}

impl Prop {
    fn phrase(self) -> &'static str {
        match self {
            Prop::Elephant => "with an elephant",
            Prop::Star => "with a star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Full-body character inside a backdrop.
    Scene,
    /// Large face on a plain background.
    Portrait,
}

/// Everything needed to render one image and write its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub layout: Layout,
    pub backdrop: Backdrop,
    pub prop: Option<Prop>,
    pub identity: usize,
    /// Caption says "person" instead of the identity name.
    pub generic_caption: bool,
    pub face_x: usize,
    pub face_y: usize,
    pub face_size: usize,
    pub jitter: [f32; 3],
}

impl SceneSpec {
    pub fn face_box(&self) -> BoundingBox {
        BoundingBox::new(
            self.face_x,
            self.face_y,
            self.face_x + self.face_size,
            self.face_y + self.face_size,
        )
    }

    pub fn caption(&self) -> String {
        let who = if self.generic_caption {
            "person"
        } else {
            IDENTITIES[self.identity].0
        };
        match self.layout {
            Layout::Portrait => format!("a portrait of the {who}"),
            Layout::Scene => {
                let mut c = format!("a picture of the {who} {}", self.backdrop.phrase());
                if let Some(p) = self.prop {
                    c.push(' ');
                    c.push_str(p.phrase());
                }
                c
            }
        }
    }

    pub fn render(&self) -> Tensor {
        let n = IMAGE_SIZE;
        let mut c = Canvas::new(n);
        match self.layout {
            Layout::Portrait => {
                c.fill_rect(0, 0, n, n, [0.90, 0.90, 0.84]);
                c.fill_rect(
                    self.face_x,
                    self.face_y + self.face_size,
                    self.face_size,
                    n,
                    [0.20, 0.30, 0.75],
                );
            }
            Layout::Scene => {
                let (sky, ground) = self.backdrop.colors();
                let horizon = 20;
                c.fill_rect(0, 0, n, horizon, sky);
                c.fill_rect(0, horizon, n, n - horizon, ground);
                if self.backdrop == Backdrop::Forest {
                    for x in [2usize, 13, 26] {
                        c.fill_rect(x, 4, 2, horizon - 4, [0.35, 0.22, 0.10]);
                    }
                }
                if self.backdrop == Backdrop::Night {
                    for (x, y) in [(3usize, 3usize), (27, 6), (22, 2)] {
                        c.fill_rect(x, y, 1, 1, [0.9, 0.9, 0.95]);
                    }
                }
                let body_x = self.face_x + self.face_size / 2 - 3;
                c.fill_rect(
                    body_x,
                    self.face_y + self.face_size,
                    6,
                    9,
                    [0.20, 0.30, 0.75],
                );
                let right_side = self.face_x < n / 2 - 4;
                match self.prop {
                    Some(Prop::Elephant) => {
                        let cx = if right_side { 25.0 } else { 6.0 };
                        c.fill_ellipse(cx, 25.0, 5.5, 4.0, [0.55, 0.55, 0.60]);
                    }
                    Some(Prop::Star) => {
                        let cx = if right_side { 26.0 } else { 5.0 };
                        c.fill_ellipse(cx, 5.0, 2.5, 2.5, [1.0, 0.92, 0.30]);
                    }
                    None => {}
                }
            }
        }
        let base = IDENTITIES[self.identity].1;
        let face = [
            (base[0] + self.jitter[0]).clamp(0.0, 1.0),
            (base[1] + self.jitter[1]).clamp(0.0, 1.0),
            (base[2] + self.jitter[2]).clamp(0.0, 1.0),
        ];
        c.fill_rect(
            self.face_x,
            self.face_y,
            self.face_size,
            self.face_size,
            face,
        );
        let eye_y = self.face_y + self.face_size / 3;
        let q = self.face_size / 4;
        for ex in [self.face_x + q, self.face_x + self.face_size - q - 1] {
            c.fill_rect(ex, eye_y, 1, 1, [0.08, 0.08, 0.08]);
        }
        c.finish()
    }
}

struct Canvas {
    n: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; 3 * n * n],
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        if x < self.n && y < self.n {
            for (ch, v) in rgb.iter().enumerate() {
                self.data[ch * self.n * self.n + y * self.n + x] = *v;
            }
        }
    }

    fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, rgb: [f32; 3]) {
        for yy in y..(y + h).min(self.n) {
            for xx in x..(x + w).min(self.n) {
                self.put(xx, yy, rgb);
            }
        }
    }

    fn fill_ellipse(&mut self, cx: f32, cy: f32, rx: f32, ry: f32, rgb: [f32; 3]) {
        for y in 0..self.n {
            for x in 0..self.n {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    fn finish(self) -> Tensor {
        Tensor::new(&[3, self.n, self.n], self.data).expect("finite canvas")
    }
}

/// Knobs for random scene generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub portrait_fraction: f32,
    pub generic_caption_fraction: f32,
    pub prop_fraction: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            portrait_fraction: 0.2,
            generic_caption_fraction: 0.15,
            prop_fraction: 0.6,
        }
    }
}

fn jitter<R: Rng>(rng: &mut R) -> [f32; 3] {
    [
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
    ]
}

pub fn random_scene<R: Rng>(rng: &mut R, identity: usize, cfg: &CorpusConfig) -> SceneSpec {
    if rng.gen::<f32>() < cfg.portrait_fraction {
        random_portrait(rng, identity)
    } else {
        let backdrop = *Backdrop::ALL.choose(rng).expect("backdrops");
        let prop = if rng.gen::<f32>() < cfg.prop_fraction {
            Some(if rng.gen::<bool>() {
                Prop::Elephant
            } else {
                Prop::Star
            })
        } else {
            None
        };
        let generic = rng.gen::<f32>() < cfg.generic_caption_fraction;
        scene_with(rng, identity, backdrop, prop, generic)
    }
}

pub fn scene_with<R: Rng>(
    rng: &mut R,
    identity: usize,
    backdrop: Backdrop,
    prop: Option<Prop>,
    generic_caption: bool,
) -> SceneSpec {
    let face_size = rng.gen_range(7..=9);
    SceneSpec {
        layout: Layout::Scene,
        backdrop,
        prop,
        identity,
        generic_caption,
        face_x: rng.gen_range(8..=15),
        face_y: rng.gen_range(5..=9),
        face_size,
        jitter: jitter(rng),
    }
}

pub fn random_portrait<R: Rng>(rng: &mut R, identity: usize) -> SceneSpec {
    let face_size = rng.gen_range(14..=16);
    SceneSpec {
        layout: Layout::Portrait,
        backdrop: Backdrop::Day,
        prop: None,
        identity,
        generic_caption: false,
        face_x: rng.gen_range(7..=10),
        face_y: rng.gen_range(4..=7),
        face_size,
        jitter: jitter(rng),
    }
}

/// Captioned corpus drawn uniformly over identities.
pub fn corpus<R: Rng>(rng: &mut R, n: usize, cfg: &CorpusConfig) -> Vec<SceneSpec> {
    (0..n)
        .map(|_| {
            let id = rng.gen_range(0..IDENTITIES.len());
            random_scene(rng, id, cfg)
        })
        .collect()
}

/// Every word a caption can contain, in a fixed order.
pub fn caption_words() -> Vec<&'static str> {
    let mut words = vec![
        "a", "picture", "portrait", "of", "the", "person", "in", "at", "day", "night", "forest",
        "desert", "with", "an", "elephant", "star",
    ];
    words.extend(IDENTITIES.iter().map(|(n, _)| *n));
    words
}
