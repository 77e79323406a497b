//! Minimal WKT support for the single geometry kind found in building
//! label files: `POLYGON ((x y, ...), (x y, ...))` in pixel coordinates.

use std::fmt::Write as _;

use thiserror::Error;

use super::{Point2D, PolygonGeom};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WktError {
    #[error("malformed WKT at byte {offset}: {reason}")]
    MalformedWkt { offset: usize, reason: String },
    #[error("ring {ring} has fewer than 3 distinct vertices")]
    DegenerateRing { ring: usize },
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, WktError> {
        Err(WktError::MalformedWkt {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn expect(&mut self, c: char) -> Result<(), WktError> {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            self.fail(format!("expected '{c}'"))
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, word: &str) -> Result<(), WktError> {
        self.skip_ws();
        let rest = self.rest();
        if rest.len() >= word.len() && rest[..word.len()].eq_ignore_ascii_case(word) {
            self.pos += word.len();
            Ok(())
        } else {
            self.fail(format!("expected keyword {word}"))
        }
    }

    fn number(&mut self) -> Result<f64, WktError> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
            .unwrap_or(rest.len());
        if len == 0 {
            return self.fail("expected a number");
        }
        match rest[..len].parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos += len;
                Ok(v)
            }
            _ => self.fail(format!("invalid number '{}'", &rest[..len])),
        }
    }
}

fn parse_ring(cur: &mut Cursor<'_>, ring: usize) -> Result<Vec<Point2D>, WktError> {
    cur.expect('(')?;
    let mut pts = Vec::new();
    loop {
        let x = cur.number()?;
        let y = cur.number()?;
        pts.push(Point2D { x, y });
        if cur.eat(',') {
            continue;
        }
        cur.expect(')')?;
        break;
    }
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    let mut distinct: Vec<Point2D> = Vec::with_capacity(pts.len());
    for p in &pts {
        if !distinct.contains(p) {
            distinct.push(*p);
        }
    }
    if distinct.len() < 3 {
        return Err(WktError::DegenerateRing { ring });
    }
    Ok(pts)
}

/// Parses a WKT `POLYGON`. The first ring becomes the exterior; the
/// closing vertex of each ring is dropped.
pub fn parse_wkt_polygon(text: &str) -> Result<PolygonGeom, WktError> {
    let mut cur = Cursor::new(text);
    cur.keyword("POLYGON")?;
    cur.expect('(')?;
    let mut rings = vec![parse_ring(&mut cur, 0)?];
    while cur.eat(',') {
        let idx = rings.len();
        rings.push(parse_ring(&mut cur, idx)?);
    }
    cur.expect(')')?;
    cur.skip_ws();
    if !cur.rest().is_empty() {
        return cur.fail("trailing characters");
    }
    let exterior = rings.remove(0);
    Ok(PolygonGeom {
        exterior,
        interiors: rings,
    })
}

/// Serializes a polygon as WKT, re-closing every ring. Coordinates are
/// written in shortest round-trip form.
pub fn to_wkt(poly: &PolygonGeom) -> String {
    let mut out = String::from("POLYGON (");
    for (i, ring) in std::iter::once(&poly.exterior)
        .chain(poly.interiors.iter())
        .enumerate()
    {
        if i > 0 {
            out.push_str(", ");
        }
        out.push('(');
        for (j, p) in ring.iter().chain(ring.first()).enumerate() {
            if j > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{} {}", p.x, p.y);
        }
        out.push(')');
    }
    out.push(')');
    out
}
