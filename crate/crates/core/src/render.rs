//! Grayscale rasterization of hopper states and the `.vdm` demonstration
//! file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::env::{EnvAction, EnvState, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};

pub const FRAME_SIZE: usize = 64;
pub const FEATURE_SIZE: usize = (FRAME_SIZE / 2) * (FRAME_SIZE / 2);
pub const DEFAULT_FPS: u32 = 30;

const MAGIC: &[u8; 4] = b"VDM1";
const FLAG_HAS_STATES: u32 = 1;

const GROUND: u8 = 90;
const TICK: u8 = 140;
const LEG: u8 = 180;
const TORSO: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities, row 0 at the top.
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    fn put(&mut self, col: i64, row: i64, value: u8) {
        if col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height {
            let i = row as usize * self.width + col as usize;
            self.pixels[i] = self.pixels[i].max(value);
        }
    }
}

/// Maps world coordinates to pixels. The camera tracks the torso
/// horizontally; the ground sits at a fixed row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub width: usize,
    pub height: usize,
    pub pixels_per_meter: f64,
    pub ground_row: f64,
    pub torso_length: f64,
    pub torso_width: f64,
}

impl Default for Viewport {
    fn default() -> Self {
        Self {
            width: FRAME_SIZE,
            height: FRAME_SIZE,
            pixels_per_meter: 16.0,
            ground_row: 58.0,
            torso_length: 0.6,
            torso_width: 0.25,
        }
    }
}

impl Viewport {
    fn to_pixel(&self, camera_x: f64, wx: f64, wy: f64) -> (f64, f64) {
        (
            self.width as f64 / 2.0 + (wx - camera_x) * self.pixels_per_meter,
            self.ground_row - wy * self.pixels_per_meter,
        )
    }
}

/// Draws the ground (with a tick every metre so horizontal travel is
/// visible), the leg as a segment from torso centre to foot, and the torso as
/// an oriented rectangle.
pub fn rasterize(state: &EnvState, view: &Viewport) -> Frame {
    let mut frame = Frame::blank(view.width, view.height);
    let cam = state.x;
    let ground = view.ground_row.round() as i64;
    for col in 0..view.width as i64 {
        for row in ground..view.height as i64 {
            frame.put(col, row, GROUND);
        }
    }
    let half_span = view.width as f64 / 2.0 / view.pixels_per_meter;
    let first = (cam - half_span).floor() as i64;
    let last = (cam + half_span).ceil() as i64;
    for m in first..=last {
        let (px, _) = view.to_pixel(cam, m as f64, 0.0);
        let col = px.round() as i64;
        frame.put(col, ground - 1, TICK);
        frame.put(col, ground - 2, TICK);
    }

    if !state.is_finite() {
        return frame;
    }

    let (ux, uy) = state.body_axis();
    let (fx, fy) = state.foot();
    let a = view.to_pixel(cam, state.x, state.y);
    let b = view.to_pixel(cam, fx, fy);
    draw_segment(&mut frame, a, b, LEG);

    // Torso rectangle: long axis along the body axis, centred on (x, y).
    let half_len = view.torso_length / 2.0;
    let half_wid = view.torso_width / 2.0;
    // Perpendicular to the body axis.
    let (nx, ny) = (uy, -ux);
    let corners: Vec<(f64, f64)> = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
        .iter()
        .map(|&(sl, sw)| {
            view.to_pixel(
                cam,
                state.x + sl * half_len * ux + sw * half_wid * nx,
                state.y + sl * half_len * uy + sw * half_wid * ny,
            )
        })
        .collect();
    fill_convex(&mut frame, &corners, TORSO);
    frame
}

fn draw_segment(frame: &mut Frame, a: (f64, f64), b: (f64, f64), value: u8) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let n = (len * 2.0).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        frame.put(x.floor() as i64, y.floor() as i64, value);
    }
}

/// Fills pixels whose centres lie inside a convex polygon.
fn fill_convex(frame: &mut Frame, poly: &[(f64, f64)], value: u8) {
    let min_x = poly.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
    let max_x = poly
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(frame.width as f64) as i64;
    let min_y = poly.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
    let max_y = poly
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(frame.height as f64) as i64;
    for row in min_y..max_y {
        for col in min_x..max_x {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut sign = 0.0f64;
            let inside = (0..poly.len()).all(|i| {
                let (x0, y0) = poly[i];
                let (x1, y1) = poly[(i + 1) % poly.len()];
                let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                if cross == 0.0 {
                    return true;
                }
                if sign == 0.0 {
                    sign = cross.signum();
                }
                cross.signum() == sign
            });
            if inside {
                frame.put(col, row, value);
            }
        }
    }
}

/// 2×2 mean pooling to 32×32, flattened row-major and scaled to `[0, 1]`.
pub fn frame_features(frame: &Frame) -> Result<Vec<f64>> {
    if frame.width != FRAME_SIZE || frame.height != FRAME_SIZE || frame.pixels.len() != FRAME_SIZE * FRAME_SIZE {
        return Err(Error::domain(format!(
            "frame_features expects a {FRAME_SIZE}x{FRAME_SIZE} frame, got {}x{} with {} pixels",
            frame.width,
            frame.height,
            frame.pixels.len()
        )));
    }
    let half = FRAME_SIZE / 2;
    let mut out = Vec::with_capacity(FEATURE_SIZE);
    for r in 0..half {
        for c in 0..half {
            let sum: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(dr, dc)| frame.get(2 * c + dc, 2 * r + dr) as u32)
                .sum();
            out.push(sum as f64 / (4.0 * 255.0));
        }
    }
    Ok(out)
}

/// A demonstration: frames plus, when recorded from the simulator, the
/// aligned states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoVideo {
    pub fps: u32,
    pub frames: Vec<Frame>,
    pub states: Option<Vec<EnvState>>,
    pub actions: Option<Vec<EnvAction>>,
}

impl DemoVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_states(&self) -> bool {
        self.states.is_some()
    }

    pub fn from_trajectory(traj: &crate::env::Trajectory, view: &Viewport, fps: u32) -> Self {
        Self {
            fps,
            frames: traj.states().map(|s| rasterize(s, view)).collect(),
            states: Some(traj.states().copied().collect()),
            actions: Some(traj.steps.iter().map(|(_, a)| *a).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::format("header", "fps must be positive"));
        }
        if let Some(f) = self.frames.first() {
            if self.frames.iter().any(|g| g.width != f.width || g.height != f.height) {
                return Err(Error::format("frames", "frames differ in size"));
            }
            if self.frames.iter().any(|g| g.pixels.len() != g.width * g.height) {
                return Err(Error::format("frames", "pixel count does not match frame size"));
            }
        }
        match (&self.states, &self.actions) {
            (None, None) => Ok(()),
            (Some(s), Some(a)) if s.len() == self.frames.len() && a.len() == self.frames.len() => Ok(()),
            (Some(_), Some(_)) => Err(Error::format("states", "state/action counts differ from frame count")),
            _ => Err(Error::format("states", "states and actions must be present together")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (h, w) = self.frames.first().map_or((FRAME_SIZE, FRAME_SIZE), |f| (f.height, f.width));
        let has = self.has_states();
        let mut out = Vec::with_capacity(32 + self.frames.len() * (h * w + 40));
        out.extend_from_slice(MAGIC);
        let header = [
            self.frames.len() as u32,
            h as u32,
            w as u32,
            if has { STATE_DIM as u32 } else { 0 },
            if has { ACTION_DIM as u32 } else { 0 },
            self.fps,
            if has { FLAG_HAS_STATES } else { 0 },
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.frames {
            out.extend_from_slice(&f.pixels);
        }
        if let (Some(states), Some(actions)) = (&self.states, &self.actions) {
            for s in states {
                for v in s.to_array() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            for a in actions {
                for v in a.to_array() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("magic", "expected \"VDM1\""));
        }
        let n_frames = r.u32("header")? as usize;
        let height = r.u32("header")? as usize;
        let width = r.u32("header")? as usize;
        let state_dim = r.u32("header")? as usize;
        let action_dim = r.u32("header")? as usize;
        let fps = r.u32("header")?;
        let flags = r.u32("header")?;
        if fps == 0 {
            return Err(Error::format("header", "fps must be positive"));
        }
        let has = flags & FLAG_HAS_STATES != 0;
        if has && (state_dim != STATE_DIM || action_dim != ACTION_DIM) {
            return Err(Error::format(
                "header",
                format!("state/action dims {state_dim}/{action_dim} do not match the hopper ({STATE_DIM}/{ACTION_DIM})"),
            ));
        }
        if !has && (state_dim != 0 || action_dim != 0) {
            return Err(Error::format("header", "frames-only file must declare zero state/action dims"));
        }
        let frame_len = height
            .checked_mul(width)
            .ok_or_else(|| Error::format("header", "frame size overflows"))?;
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            frames.push(Frame {
                width,
                height,
                pixels: r.take(frame_len, "frames")?.to_vec(),
            });
        }
        let (states, actions) = if has {
            let mut states = Vec::with_capacity(n_frames);
            for _ in 0..n_frames {
                let mut a = [0.0; STATE_DIM];
                for v in a.iter_mut() {
                    *v = r.f32("states")? as f64;
                }
                states.push(EnvState::from_array(a));
            }
            let mut actions = Vec::with_capacity(n_frames);
            for _ in 0..n_frames {
                let mut a = [0.0; ACTION_DIM];
                for v in a.iter_mut() {
                    *v = r.f32("actions")? as f64;
                }
                actions.push(EnvAction::from_array(a));
            }
            (Some(states), Some(actions))
        } else {
            (None, None)
        };
        if r.pos != bytes.len() {
            return Err(Error::format("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            fps,
            frames,
            states,
            actions,
        })
    }

    /// Rounds stored states and actions to the file's `f32` precision so
    /// that an in-memory demo compares equal to its re-read copy.
    pub fn quantized(mut self) -> Self {
        let q = |v: f64| v as f32 as f64;
        if let Some(states) = &mut self.states {
            for s in states.iter_mut() {
                *s = EnvState::from_array(s.to_array().map(q));
            }
        }
        if let Some(actions) = &mut self.actions {
            for a in actions.iter_mut() {
                *a = EnvAction::from_array(a.to_array().map(q));
            }
        }
        self
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                section,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, section: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_demo(video: &DemoVideo, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &video.to_bytes()?)
}

pub fn read_demo(path: impl AsRef<Path>) -> Result<DemoVideo> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DemoVideo::from_bytes(&bytes)
}
