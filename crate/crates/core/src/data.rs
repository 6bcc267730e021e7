//! Procedural scenes of coloured rectangles with captions derived from them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenEncoder, StubConfig};
use crate::masking::{BlockSpec, PatchGrid};
use crate::numerics::Tensor;
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

/// Pixels along one side of a square patch.
pub const PATCH_SIDE: usize = 4;
pub const CHANNELS: usize = 3;
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE * CHANNELS;
pub const BACKGROUND: [f64; 3] = [0.25, 0.25, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colour {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Colour {
    pub const ALL: [Colour; 6] = [Colour::Red, Colour::Green, Colour::Blue, Colour::Yellow, Colour::Cyan, Colour::Magenta];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Colour::Red => [1.0, 0.0, 0.0],
            Colour::Green => [0.0, 1.0, 0.0],
            Colour::Blue => [0.0, 0.0, 1.0],
            Colour::Yellow => [1.0, 1.0, 0.0],
            Colour::Cyan => [0.0, 1.0, 1.0],
            Colour::Magenta => [1.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    /// Quadrant holding the centre of `b`; centres on a midline go down/right.
    pub fn of(b: &BlockSpec, grid: PatchGrid) -> Self {
        let top = 2 * b.top + b.height < grid.rows;
        let left = 2 * b.left + b.width < grid.cols;
        match (top, left) {
            (true, true) => Quadrant::TopLeft,
            (true, false) => Quadrant::TopRight,
            (false, true) => Quadrant::BottomLeft,
            (false, false) => Quadrant::BottomRight,
        }
    }

    /// Patch-row and patch-column ranges of this quadrant.
    fn bounds(self, grid: PatchGrid) -> ((usize, usize), (usize, usize)) {
        let (hr, hc) = (grid.rows / 2, grid.cols / 2);
        let rows = if matches!(self, Quadrant::TopLeft | Quadrant::TopRight) { (0, hr) } else { (hr, grid.rows) };
        let cols = if matches!(self, Quadrant::TopLeft | Quadrant::BottomLeft) { (0, hc) } else { (hc, grid.cols) };
        (rows, cols)
    }
}

/// Closed vocabulary: BOS, EOS, three counts, six colours, four quadrants
/// and a word for background patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticVocab {
    pub size: usize,
}

impl Default for SyntheticVocab {
    fn default() -> Self {
        Self { size: 64 }
    }
}

impl SyntheticVocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    const COUNT0: usize = 2;
    const COLOUR0: usize = 5;
    const QUADRANT0: usize = 11;
    pub const BACKGROUND: usize = 15;
    /// Smallest vocabulary holding every word.
    pub const USED: usize = 16;

    pub fn new(size: usize) -> Result<Self> {
        if size < Self::USED {
            return Err(Error::Config(format!("vocabulary of {size} cannot hold {} words", Self::USED)));
        }
        Ok(Self { size })
    }

    pub fn count(n: usize) -> usize {
        assert!((1..=3).contains(&n), "count {n}");
        Self::COUNT0 + n - 1
    }

    pub fn colour(c: Colour) -> usize {
        Self::COLOUR0 + c as usize
    }

    pub fn quadrant(q: Quadrant) -> usize {
        Self::QUADRANT0 + q as usize
    }

    pub fn colour_of(id: usize) -> Option<Colour> {
        id.checked_sub(Self::COLOUR0).and_then(|i| Colour::ALL.get(i).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub colour: Colour,
    pub block: BlockSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: PatchGrid,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// `[BOS, count, (colour, quadrant)…, EOS]`, shapes ordered by quadrant.
    pub fn caption(&self) -> Vec<usize> {
        let mut words: Vec<(Quadrant, Colour)> = self.shapes.iter().map(|s| (Quadrant::of(&s.block, self.grid), s.colour)).collect();
        words.sort();
        let mut out = vec![SyntheticVocab::BOS, SyntheticVocab::count(self.shapes.len())];
        for (q, c) in words {
            out.push(SyntheticVocab::colour(c));
            out.push(SyntheticVocab::quadrant(q));
        }
        out.push(SyntheticVocab::EOS);
        out
    }

    /// One word per patch in raster order: the colour showing there, or
    /// the background word.
    pub fn patch_words(&self) -> Vec<usize> {
        let mut words = vec![SyntheticVocab::BACKGROUND; self.grid.n()];
        for s in &self.shapes {
            for r in s.block.top..s.block.top + s.block.height {
                for c in s.block.left..s.block.left + s.block.width {
                    words[r * self.grid.cols + c] = SyntheticVocab::colour(s.colour);
                }
            }
        }
        words
    }

    /// `[N × PATCH_PIXELS]`; each patch row is `PATCH_SIDE × PATCH_SIDE`
    /// pixels of interleaved RGB. Later shapes paint over earlier ones.
    pub fn render(&self) -> Tensor {
        let n = self.grid.n();
        let mut colour = vec![BACKGROUND; n];
        for s in &self.shapes {
            for r in s.block.top..s.block.top + s.block.height {
                for c in s.block.left..s.block.left + s.block.width {
                    colour[r * self.grid.cols + c] = s.colour.rgb();
                }
            }
        }
        let data = colour
            .iter()
            .flat_map(|rgb| std::iter::repeat_n(rgb, PATCH_SIDE * PATCH_SIDE).flatten().copied())
            .collect();
        Tensor::new(vec![n, PATCH_PIXELS], data).expect("render shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSample {
    pub index: usize,
    pub grid: PatchGrid,
    #[serde(skip)]
    pub pixels: Tensor,
    pub caption: Vec<usize>,
    pub scene: Scene,
}

fn check_grid(grid: PatchGrid) -> Result<()> {
    if grid.rows < 2 || grid.cols < 2 {
        return Err(Error::Data(format!(
            "a {}×{} grid has no room for one shape per quadrant",
            grid.rows, grid.cols
        )));
    }
    Ok(())
}

/// Sample `index` of the stream seeded by `seed`; independent of every
/// other index.
pub fn sample(seed: u64, index: usize, grid: PatchGrid) -> Result<SyntheticSample> {
    check_grid(grid)?;
    let mut rng = rng_for(seed, Stream::Scene, index as u64);
    let count = rng.random_range(1..=3);
    let mut quads = Quadrant::ALL.to_vec();
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let q = quads.remove(rng.random_range(0..quads.len()));
        let ((r0, r1), (c0, c1)) = q.bounds(grid);
        let height = rng.random_range(1..=r1 - r0);
        let width = rng.random_range(1..=c1 - c0);
        let top = rng.random_range(r0..=r1 - height);
        let left = rng.random_range(c0..=c1 - width);
        let colour = Colour::ALL[rng.random_range(0..Colour::ALL.len())];
        shapes.push(Shape {
            colour,
            block: BlockSpec { top, left, height, width },
        });
    }
    Ok(from_scene(index, Scene { grid, shapes }))
}

fn from_scene(index: usize, scene: Scene) -> SyntheticSample {
    SyntheticSample {
        index,
        grid: scene.grid,
        pixels: scene.render(),
        caption: scene.caption(),
        scene,
    }
}

pub fn generate(seed: u64, n: usize, grid: PatchGrid, vocab: SyntheticVocab) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Data("need at least one sample".into()));
    }
    SyntheticVocab::new(vocab.size)?;
    (0..n).map(|i| sample(seed, i, grid)).collect()
}

/// Scenes filled entirely by one colour.
pub fn constant_colour(seed: u64, n: usize, grid: PatchGrid) -> Result<Vec<SyntheticSample>> {
    check_grid(grid)?;
    Ok((0..n)
        .map(|i| {
            let c = rng_for(seed, Stream::Scene, i as u64).random_range(0..Colour::ALL.len());
            let shape = Shape {
                colour: Colour::ALL[c],
                block: BlockSpec {
                    top: 0,
                    left: 0,
                    height: grid.rows,
                    width: grid.cols,
                },
            };
            from_scene(i, Scene { grid, shapes: vec![shape] })
        })
        .collect())
}

/// Samples with a pair of frozen stub encoders. Both encoders are affine in
/// the patch pixels, so target embeddings are an exact affine function of
/// what a context patch shows.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub samples: Vec<SyntheticSample>,
    pub context_encoder: FrozenEncoder,
    pub target_encoder: FrozenEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub context: StubConfig,
    pub target: StubConfig,
    pub constant_colour: bool,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            context: StubConfig {
                seed: 11,
                ..StubConfig::default()
            },
            target: StubConfig {
                seed: 12,
                ..StubConfig::default()
            },
            constant_colour: false,
        }
    }
}

pub fn fixture(seed: u64, n: usize, grid: PatchGrid, cfg: &FixtureConfig) -> Result<Fixture> {
    if cfg.target.nonlinear {
        return Err(Error::Config("the learnability target encoder must be affine".into()));
    }
    let samples = if cfg.constant_colour {
        constant_colour(seed, n, grid)?
    } else {
        generate(seed, n, grid, SyntheticVocab::default())?
    };
    Ok(Fixture {
        samples,
        context_encoder: FrozenEncoder::stub(cfg.context.clone()),
        target_encoder: FrozenEncoder::stub(cfg.target.clone()),
    })
}

pub fn learnability_fixture(seed: u64, n: usize, grid: PatchGrid) -> Result<Fixture> {
    fixture(seed, n, grid, &FixtureConfig::default())
}

/// Dataset section of a training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub n: usize,
    pub fixture: FixtureConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 2400,
            fixture: FixtureConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn build(&self, grid: PatchGrid) -> Result<Fixture> {
        fixture(self.seed, self.n, grid, &self.fixture)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::objective::cosine_distance;

    const GRID: PatchGrid = PatchGrid { rows: 6, cols: 6 };

    #[test]
    fn generation_is_deterministic_per_index() {
        let a = generate(5, 20, GRID, SyntheticVocab::default()).unwrap();
        let b = generate(5, 20, GRID, SyntheticVocab::default()).unwrap();
        assert_eq!(a, b);
        for i in (0..20).rev() {
            assert_eq!(sample(5, i, GRID).unwrap(), a[i]);
        }
        assert_ne!(generate(6, 20, GRID, SyntheticVocab::default()).unwrap(), a);
    }

    #[test]
    fn single_red_top_left_caption() {
        let scene = Scene {
            grid: GRID,
            shapes: vec![Shape {
                colour: Colour::Red,
                block: BlockSpec {
                    top: 0,
                    left: 1,
                    height: 2,
                    width: 2,
                },
            }],
        };
        let id_one = 2;
        let id_red = 5;
        let id_tl = 11;
        assert_eq!(scene.caption(), vec![0, id_one, id_red, id_tl, 1]);
    }

    #[test]
    fn captions_and_counts_follow_the_grammar() {
        let v = SyntheticVocab::default();
        for s in generate(1, 300, GRID, v).unwrap() {
            let n = s.scene.shapes.len();
            assert!((1..=3).contains(&n));
            assert_eq!(s.caption.len(), 3 + 2 * n);
            assert_eq!((s.caption[0], *s.caption.last().unwrap()), (SyntheticVocab::BOS, SyntheticVocab::EOS));
            assert_eq!(s.caption[1], SyntheticVocab::count(n));
            assert!(s.caption.iter().all(|&t| t < SyntheticVocab::USED && t < v.size));
            assert!(s.pixels.data().iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(s.pixels.shape(), &[36, PATCH_PIXELS]);
            // One shape per quadrant, and the caption names each quadrant once.
            let quads: Vec<usize> = s.caption[3..s.caption.len() - 1].iter().step_by(2).copied().collect();
            let mut sorted = quads.clone();
            sorted.dedup();
            assert_eq!(sorted, quads);
        }
    }

    #[test]
    fn caption_ids_determine_colours() {
        // Stump: each colour id maps to exactly one colour across the corpus.
        let mut seen: BTreeMap<usize, Colour> = BTreeMap::new();
        let mut correct = 0;
        let mut total = 0;
        for s in generate(2, 200, GRID, SyntheticVocab::default()).unwrap() {
            let mut by_quadrant: Vec<(Quadrant, Colour)> =
                s.scene.shapes.iter().map(|sh| (Quadrant::of(&sh.block, GRID), sh.colour)).collect();
            by_quadrant.sort();
            for (j, (_, colour)) in by_quadrant.iter().enumerate() {
                let id = s.caption[2 + 2 * j];
                let predicted = *seen.entry(id).or_insert(*colour);
                total += 1;
                correct += usize::from(predicted == *colour && SyntheticVocab::colour_of(id) == Some(*colour));
            }
        }
        assert_eq!(correct, total);
    }

    #[test]
    fn patch_words_track_pixels() {
        for s in generate(6, 50, GRID, SyntheticVocab::default()).unwrap() {
            let words = s.scene.patch_words();
            for i in 0..GRID.n() {
                let expect = match SyntheticVocab::colour_of(words[i]) {
                    Some(c) => c.rgb(),
                    None => {
                        assert_eq!(words[i], SyntheticVocab::BACKGROUND);
                        BACKGROUND
                    }
                };
                assert_eq!(&s.pixels.row(i)[..3], &expect);
            }
        }
    }

    #[test]
    fn neighbouring_patches_inside_a_shape_match() {
        for s in generate(3, 100, GRID, SyntheticVocab::default()).unwrap() {
            let top = s.scene.shapes.last().unwrap();
            let b = top.block;
            for r in b.top..b.top + b.height {
                for c in b.left..b.left + b.width - 1 {
                    assert_eq!(s.pixels.row(r * 6 + c), s.pixels.row(r * 6 + c + 1));
                }
            }
        }
    }

    #[test]
    fn small_grids_are_rejected() {
        assert!(matches!(sample(0, 0, PatchGrid { rows: 1, cols: 4 }), Err(Error::Data(_))));
        assert!(generate(0, 0, GRID, SyntheticVocab::default()).is_err());
        assert!(SyntheticVocab::new(10).is_err());
        assert!(sample(0, 0, PatchGrid { rows: 2, cols: 3 }).is_ok());
    }

    #[test]
    fn quadrants_of_odd_grids() {
        let g = PatchGrid { rows: 5, cols: 5 };
        let blk = |top, left| BlockSpec { top, left, height: 1, width: 1 };
        assert_eq!(Quadrant::of(&blk(1, 1), g), Quadrant::TopLeft);
        assert_eq!(Quadrant::of(&blk(2, 2), g), Quadrant::BottomRight);
        assert_eq!(Quadrant::of(&blk(0, 4), g), Quadrant::TopRight);
        for s in generate(4, 100, g, SyntheticVocab::default()).unwrap() {
            for sh in &s.scene.shapes {
                let ((r0, r1), (c0, c1)) = Quadrant::of(&sh.block, g).bounds(g);
                assert!(sh.block.top >= r0 && sh.block.top + sh.block.height <= r1);
                assert!(sh.block.left >= c0 && sh.block.left + sh.block.width <= c1);
            }
        }
    }

    #[test]
    fn same_seed_encoders_give_self_prediction() {
        let cfg = FixtureConfig {
            context: StubConfig { seed: 3, ..StubConfig::default() },
            target: StubConfig { seed: 3, ..StubConfig::default() },
            constant_colour: false,
        };
        let f = fixture(0, 4, GRID, &cfg).unwrap();
        for s in &f.samples {
            let c = f.context_encoder.encode(s.index, &s.pixels).unwrap();
            let t = f.target_encoder.encode(s.index, &s.pixels).unwrap();
            for i in 0..GRID.n() {
                assert!((cosine_distance(c.row(i), t.row(i)).unwrap() + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_colour_targets_are_constant() {
        let f = fixture(
            0,
            5,
            GRID,
            &FixtureConfig {
                constant_colour: true,
                ..FixtureConfig::default()
            },
        )
        .unwrap();
        for s in &f.samples {
            let t = f.target_encoder.encode(s.index, &s.pixels).unwrap();
            assert!((1..GRID.n()).all(|i| t.row(i) == t.row(0)));
            assert_eq!(s.caption.len(), 5);
        }
        let bad = FixtureConfig {
            target: StubConfig { nonlinear: true, ..StubConfig::default() },
            ..FixtureConfig::default()
        };
        assert!(fixture(0, 1, GRID, &bad).is_err());
    }

    #[test]
    fn target_embeddings_are_affine_in_pixels() {
        let f = learnability_fixture(1, 3, GRID).unwrap();
        let s = &f.samples[0];
        let t = f.target_encoder.encode(0, &s.pixels).unwrap();
        let zero = Tensor::zeros(&[1, PATCH_PIXELS]);
        let bias = f.target_encoder.encode(0, &zero).unwrap();
        // f(a) + f(b) − f(0) = f(a + b) for an affine map.
        let (a, b) = (s.pixels.row(0), s.pixels.row(7));
        let sum = Tensor::new(vec![1, PATCH_PIXELS], a.iter().zip(b).map(|(x, y)| x + y).collect()).unwrap();
        let fs = f.target_encoder.encode(0, &sum).unwrap();
        for j in 0..t.cols() {
            assert!((t.at(0, j) + t.at(7, j) - bias.at(0, j) - fs.at(0, j)).abs() < 1e-12);
        }
    }
}
