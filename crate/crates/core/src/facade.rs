//! Detection records and the per-node / per-edge geometric features.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Window,
    Door,
}

/// Axis-aligned window/door box in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_id: Option<u32>,
}

impl DetectionBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, category: Category) -> Self {
        Self {
            x,
            y,
            w,
            h,
            category,
            floor_id: None,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Pixel area shared with `other`.
    pub fn intersection(&self, other: &DetectionBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        ix.max(0.0) * iy.max(0.0)
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// One facade image and its detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacadeRecord {
    pub facade_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<DetectionBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_count: Option<u32>,
}

impl FacadeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "facade `{}`: image dimensions must be positive",
                self.facade_id
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            validate_box(b).map_err(|e| Error::invalid(format!("facade `{}` box {i}: {e}", self.facade_id)))?;
        }
        if self.floor_count == Some(0) {
            return Err(Error::invalid(format!("facade `{}`: floor_count must be positive", self.facade_id)));
        }
        Ok(())
    }
}

fn validate_box(b: &DetectionBox) -> Result<(), String> {
    for (name, v) in [("x", b.x), ("y", b.y), ("w", b.w), ("h", b.h)] {
        if !v.is_finite() {
            return Err(format!("field `{name}` is not finite"));
        }
    }
    if b.w <= 0.0 {
        return Err(format!("field `w` must be > 0 (got {})", b.w));
    }
    if b.h <= 0.0 {
        return Err(format!("field `h` must be > 0 (got {})", b.h));
    }
    Ok(())
}

/// `[n_cx, n_cy, n_w, n_h, aspect, is_window]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeFeatures(pub [f64; 6]);

impl NodeFeatures {
    pub const DIM: usize = 6;

    pub fn center_x(&self) -> f64 {
        self.0[0]
    }
    pub fn center_y(&self) -> f64 {
        self.0[1]
    }
    pub fn width(&self) -> f64 {
        self.0[2]
    }
    pub fn height(&self) -> f64 {
        self.0[3]
    }
    pub fn aspect(&self) -> f64 {
        self.0[4]
    }
    pub fn is_window(&self) -> bool {
        self.0[5] == 1.0
    }
}

/// `[dx_norm, dy_norm, iou, v_overlap]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFeatures(pub [f64; 4]);

impl EdgeFeatures {
    pub const DIM: usize = 4;

    pub fn dx(&self) -> f64 {
        self.0[0]
    }
    pub fn dy(&self) -> f64 {
        self.0[1]
    }
    pub fn iou(&self) -> f64 {
        self.0[2]
    }
    pub fn overlap(&self) -> f64 {
        self.0[3]
    }
}

/// Clips a box to `[0, W] x [0, H]`; the flag reports whether anything moved.
pub fn clamp_box(b: &DetectionBox, width: f64, height: f64) -> (DetectionBox, bool) {
    let x0 = b.x.clamp(0.0, width);
    let y0 = b.y.clamp(0.0, height);
    let x1 = (b.x + b.w).clamp(0.0, width);
    let y1 = (b.y + b.h).clamp(0.0, height);
    let clamped = DetectionBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
        category: b.category,
        floor_id: b.floor_id,
    };
    let moved = x0 != b.x || y0 != b.y || x1 != b.x + b.w || y1 != b.y + b.h;
    (clamped, moved)
}

/// Node feature vector of a box inside a `width x height` image.
pub fn node_features(b: &DetectionBox, width: f64, height: f64) -> Result<NodeFeatures> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    let (b, _) = clamp_box(b, width, height);
    if b.h <= 0.0 {
        return Err(Error::invalid("degenerate box: zero height after clamping"));
    }
    if b.w <= 0.0 {
        return Err(Error::invalid("degenerate box: zero width after clamping"));
    }
    let (cx, cy) = b.center();
    let is_window = match b.category {
        Category::Window => 1.0,
        Category::Door => 0.0,
    };
    Ok(NodeFeatures([
        cx / width,
        cy / height,
        b.w / width,
        b.h / height,
        b.w / b.h,
        is_window,
    ]))
}

/// Pairwise features; both boxes are clamped first.
pub fn edge_features(bi: &DetectionBox, bj: &DetectionBox, width: f64, height: f64) -> EdgeFeatures {
    let (bi, _) = clamp_box(bi, width, height);
    let (bj, _) = clamp_box(bj, width, height);
    let (xi, yi) = bi.center();
    let (xj, yj) = bj.center();
    let inter = bi.intersection(&bj);
    let min_area = bi.area().min(bj.area());
    let overlap = if min_area > 0.0 { inter / min_area } else { 0.0 };
    EdgeFeatures([
        (xi - xj).abs() / width,
        (yi - yj).abs() / height,
        bi.iou(&bj),
        overlap,
    ])
}

#[derive(Deserialize)]
struct RawRecord {
    facade_id: String,
    width: i64,
    height: i64,
    boxes: Vec<DetectionBox>,
    #[serde(default)]
    floor_count: Option<i64>,
}

fn parse_line(line: &str) -> Result<FacadeRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.width <= 0 || raw.height <= 0 {
        return Err(format!(
            "image dimensions must be positive (width {}, height {})",
            raw.width, raw.height
        ));
    }
    let to_u32 = |name: &str, v: i64| u32::try_from(v).map_err(|_| format!("field `{name}` out of range: {v}"));
    let floor_count = match raw.floor_count {
        Some(c) if c <= 0 => return Err(format!("field `floor_count` must be positive (got {c})")),
        Some(c) => Some(to_u32("floor_count", c)?),
        None => None,
    };
    for (i, b) in raw.boxes.iter().enumerate() {
        validate_box(b).map_err(|e| format!("box {i}: {e}"))?;
    }
    Ok(FacadeRecord {
        facade_id: raw.facade_id,
        width: to_u32("width", raw.width)?,
        height: to_u32("height", raw.height)?,
        boxes: raw.boxes,
        floor_count,
    })
}

/// Reads JSON-lines facade records; blank lines are skipped.
pub fn read_facades(reader: impl BufRead) -> Result<Vec<FacadeRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn load_facades(path: impl AsRef<Path>) -> Result<Vec<FacadeRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_facades(BufReader::new(file))
}

pub fn write_facades(mut w: impl Write, records: &[FacadeRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn save_facades(path: impl AsRef<Path>, records: &[FacadeRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_facades(&mut w, records)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> DetectionBox {
        DetectionBox::new(x, y, w, h, Category::Window)
    }

    #[test]
    fn node_features_small_box() {
        let f = node_features(&bx(0.0, 0.0, 10.0, 10.0), 100.0, 100.0).unwrap();
        assert_eq!(f.0, [0.05, 0.05, 0.1, 0.1, 1.0, 1.0]);
    }

    #[test]
    fn full_image_box() {
        let f = node_features(&bx(0.0, 0.0, 640.0, 480.0), 640.0, 480.0).unwrap();
        assert_eq!((f.center_x(), f.center_y(), f.width(), f.height()), (0.5, 0.5, 1.0, 1.0));
    }

    #[test]
    fn aspect_uses_pixels() {
        let f = node_features(&bx(10.0, 10.0, 20.0, 40.0), 100.0, 400.0).unwrap();
        assert_eq!(f.aspect(), 0.5);
        let door = DetectionBox::new(0.0, 0.0, 5.0, 5.0, Category::Door);
        assert!(!node_features(&door, 10.0, 10.0).unwrap().is_window());
    }

    #[test]
    fn zero_height_is_an_error() {
        assert!(node_features(&bx(0.0, 0.0, 10.0, 0.0), 100.0, 100.0).is_err());
        // entirely below the image: clamps to zero height
        assert!(node_features(&bx(0.0, 150.0, 10.0, 10.0), 100.0, 100.0).is_err());
    }

    #[test]
    fn out_of_frame_box_is_clamped() {
        let (c, moved) = clamp_box(&bx(-10.0, 90.0, 30.0, 20.0), 100.0, 100.0);
        assert!(moved);
        assert_eq!((c.x, c.y, c.w, c.h), (0.0, 90.0, 20.0, 10.0));
        let f = node_features(&bx(-10.0, 90.0, 30.0, 20.0), 100.0, 100.0).unwrap();
        assert!(f.0[..4].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_and_disjoint_edges() {
        let a = bx(10.0, 10.0, 20.0, 30.0);
        let e = edge_features(&a, &a, 100.0, 100.0);
        assert_eq!(e.0, [0.0, 0.0, 1.0, 1.0]);
        let e = edge_features(&a, &bx(50.0, 50.0, 5.0, 5.0), 100.0, 100.0);
        assert_eq!((e.iou(), e.overlap()), (0.0, 0.0));
    }

    #[test]
    fn half_shifted_boxes() {
        let e = edge_features(&bx(0.0, 0.0, 10.0, 10.0), &bx(5.0, 0.0, 10.0, 10.0), 100.0, 100.0);
        assert!((e.iou() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.overlap(), 0.5);
        assert_eq!(e.dx(), 0.05);
    }

    #[test]
    fn parse_records() {
        assert!(read_facades("".as_bytes()).unwrap().is_empty());
        let line = r#"{"boxes":[{"x":1,"y":2,"w":3,"h":4,"category":"door","floor_id":0,"extra":1}],"height":10,"width":20,"facade_id":"a","unknown":true}"#;
        let recs = read_facades(line.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].boxes[0].category, Category::Door);
        assert_eq!(recs[0].boxes[0].floor_id, Some(0));
        assert_eq!(recs[0].floor_count, None);
    }

    #[test]
    fn invalid_lines_report_line_and_field() {
        let text = concat!(
            r#"{"facade_id":"a","width":10,"height":10,"boxes":[]}"#,
            "\n",
            r#"{"facade_id":"b","width":10,"height":10,"boxes":[{"x":0,"y":0,"w":0,"h":2,"category":"window"}]}"#,
        );
        let err = read_facades(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("`w`"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let neg = r#"{"facade_id":"a","width":-10,"height":10,"boxes":[]}"#;
        assert!(matches!(read_facades(neg.as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_facades("{not json".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let rec = FacadeRecord {
            facade_id: "f".into(),
            width: 800,
            height: 1200,
            boxes: vec![bx(1.5, 2.25, 3.0, 4.0)],
            floor_count: Some(3),
        };
        let mut buf = Vec::new();
        write_facades(&mut buf, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_facades(buf.as_slice()).unwrap(), vec![rec]);
    }

    fn arb_box() -> impl Strategy<Value = DetectionBox> {
        (0.0f64..90.0, 0.0f64..90.0, 0.5f64..40.0, 0.5f64..40.0)
            .prop_map(|(x, y, w, h)| bx(x, y, w, h))
    }

    proptest! {
        #[test]
        fn overlap_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let e = edge_features(&a, &b, 100.0, 100.0);
            prop_assert!(0.0 <= e.iou());
            prop_assert!(e.iou() <= e.overlap() + 1e-15);
            prop_assert!(e.overlap() <= 1.0 + 1e-15);
            prop_assert!(e.0.iter().all(|v| (0.0..=1.0 + 1e-15).contains(v)));
            prop_assert_eq!(e, edge_features(&b, &a, 100.0, 100.0));
        }
    }
}
