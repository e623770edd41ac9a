//! Reader for the Pascal VOC annotation schema.
//!
//! A small non-validating XML tokenizer builds an element tree (attributes,
//! comments, processing instructions and DOCTYPE are skipped), then the
//! fields the detector needs are pulled out of it. Only direct children are
//! consulted, so `<part>` boxes nested in an object are ignored.
//!
//! VOC corners are 1-based inclusive pixel indices. A minimum corner `v`
//! maps to `(v − 1)/extent` and a maximum corner to `v/extent`, so the box
//! covers exactly the listed pixels.

use crate::error::{DesError, Result};
use crate::raster::BoundingBox;

#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug)]
struct Element {
    name: String,
    line: usize,
    text: String,
    children: Vec<Element>,
}

impl Element {
    fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    fn require(&self, name: &str) -> Result<&Element> {
        self.child(name).ok_or_else(|| DesError::Xml {
            element: name.to_string(),
            line: self.line,
            detail: format!("missing inside <{}>", self.name),
        })
    }

    fn number(&self, name: &str) -> Result<f64> {
        let e = self.require(name)?;
        let t = e.text.trim();
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(DesError::Xml {
                element: name.to_string(),
                line: e.line,
                detail: format!("`{t}` is not a number"),
            }),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, element: &str, detail: impl Into<String>) -> DesError {
        DesError::Xml {
            element: element.to_string(),
            line: self.line,
            detail: detail.into(),
        }
    }

    fn bump(&mut self, n: usize) {
        let end = (self.pos + n).min(self.src.len());
        self.line += self.src[self.pos..end].iter().filter(|&&b| b == b'\n').count();
        self.pos = end;
    }

    fn starts_with(&self, s: &[u8]) -> bool {
        self.src[self.pos..].starts_with(s)
    }

    /// Advances past the next occurrence of `end`.
    fn skip_past(&mut self, end: &[u8], what: &str) -> Result<()> {
        match self.src[self.pos..].windows(end.len()).position(|w| w == end) {
            Some(i) => {
                self.bump(i + end.len());
                Ok(())
            }
            None => Err(self.err(what, "unterminated")),
        }
    }

    fn name(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            if b.is_ascii_whitespace() || matches!(b, b'>' | b'/' | b'=') {
                break;
            }
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    /// Skips attributes up to `>` or `/>`; returns whether the tag self-closes.
    fn tag_rest(&mut self, element: &str) -> Result<bool> {
        let mut quote: Option<u8> = None;
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            match quote {
                Some(q) if b == q => quote = None,
                Some(_) => {}
                None => match b {
                    b'"' | b'\'' => quote = Some(b),
                    b'>' => {
                        self.bump(1);
                        return Ok(false);
                    }
                    b'/' if self.src.get(self.pos + 1) == Some(&b'>') => {
                        self.bump(2);
                        return Ok(true);
                    }
                    b'<' => return Err(self.err(element, "`<` inside a tag")),
                    _ => {}
                },
            }
            self.bump(1);
        }
        Err(self.err(element, "tag is not closed"))
    }
}

fn unescape(raw: &str) -> String {
    raw.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

fn parse_tree(src: &[u8]) -> Result<Element> {
    let mut lx = Lexer { src, pos: 0, line: 1 };
    // Open elements; the bottom entry is a synthetic document node.
    let mut stack = vec![Element {
        name: String::new(),
        line: 1,
        text: String::new(),
        children: Vec::new(),
    }];
    while lx.pos < src.len() {
        if lx.starts_with(b"<!--") {
            lx.skip_past(b"-->", "comment")?;
        } else if lx.starts_with(b"<![CDATA[") {
            let start = lx.pos + 9;
            lx.skip_past(b"]]>", "CDATA")?;
            let body = String::from_utf8_lossy(&src[start..lx.pos - 3]).into_owned();
            stack.last_mut().expect("document node").text.push_str(&body);
        } else if lx.starts_with(b"<?") {
            lx.skip_past(b"?>", "processing instruction")?;
        } else if lx.starts_with(b"<!") {
            lx.skip_past(b">", "declaration")?;
        } else if lx.starts_with(b"</") {
            lx.bump(2);
            let name = lx.name();
            let rest_ok = lx.skip_past(b">", &name);
            rest_ok?;
            if stack.len() < 2 {
                return Err(lx.err(&name, "closing tag without a matching opening tag"));
            }
            let open = stack.pop().expect("checked above");
            if open.name != name {
                return Err(lx.err(&open.name, format!("closed by </{name}>")));
            }
            stack.last_mut().expect("document node").children.push(open);
        } else if lx.starts_with(b"<") {
            lx.bump(1);
            let line = lx.line;
            let name = lx.name();
            if name.is_empty() {
                return Err(lx.err("?", "empty element name"));
            }
            let closed = lx.tag_rest(&name)?;
            let e = Element {
                name,
                line,
                text: String::new(),
                children: Vec::new(),
            };
            if closed {
                stack.last_mut().expect("document node").children.push(e);
            } else {
                stack.push(e);
            }
        } else {
            let start = lx.pos;
            let end = src[start..].iter().position(|&b| b == b'<').map_or(src.len(), |i| start + i);
            let text = unescape(&String::from_utf8_lossy(&src[start..end]));
            lx.bump(end - start);
            stack.last_mut().expect("document node").text.push_str(&text);
        }
    }
    if stack.len() > 1 {
        let open = stack.pop().expect("nonempty");
        return Err(DesError::Xml {
            element: open.name,
            line: open.line,
            detail: "not closed before end of document".into(),
        });
    }
    let mut doc = stack.pop().expect("document node");
    match doc.children.len() {
        1 => Ok(doc.children.pop().expect("one child")),
        0 => Err(DesError::Xml {
            element: "annotation".into(),
            line: 1,
            detail: "document has no root element".into(),
        }),
        _ => Err(DesError::Xml {
            element: doc.children[1].name.clone(),
            line: doc.children[1].line,
            detail: "second root element".into(),
        }),
    }
}

/// Parses an annotation, mapping object names to class ids through
/// `class_names` (index 0 is background and never matches an object).
pub fn parse_voc_xml(bytes: &[u8], class_names: &[String]) -> Result<VocAnnotation> {
    let root = parse_tree(bytes)?;
    if root.name != "annotation" {
        return Err(DesError::Xml {
            element: "annotation".into(),
            line: root.line,
            detail: format!("root element is <{}>", root.name),
        });
    }
    let size = root.require("size")?;
    let extent = |name: &str| -> Result<usize> {
        let v = size.number(name)?;
        if v < 1.0 || v.fract() != 0.0 || v > 1e9 {
            let e = size.require(name)?;
            return Err(DesError::Xml {
                element: name.into(),
                line: e.line,
                detail: format!("image extent must be a positive integer, got {v}"),
            });
        }
        Ok(v as usize)
    };
    let width = extent("width")?;
    let height = extent("height")?;

    let mut boxes = Vec::new();
    for obj in root.children.iter().filter(|c| c.name == "object") {
        let name_el = obj.require("name")?;
        let name = name_el.text.trim();
        let class_id = class_names
            .iter()
            .skip(1)
            .position(|c| c == name)
            .map(|i| i + 1)
            .ok_or_else(|| DesError::UnknownClass(name.to_string()))?;
        let difficult = match obj.child("difficult") {
            None => false,
            Some(d) => match d.text.trim() {
                "0" | "" => false,
                "1" => true,
                other => {
                    return Err(DesError::Xml {
                        element: "difficult".into(),
                        line: d.line,
                        detail: format!("expected 0 or 1, got `{other}`"),
                    })
                }
            },
        };
        let bb = obj.require("bndbox")?;
        let (xmin, ymin, xmax, ymax) = (bb.number("xmin")?, bb.number("ymin")?, bb.number("xmax")?, bb.number("ymax")?);
        if xmin >= xmax || ymin >= ymax {
            return Err(DesError::Validation(format!(
                "object `{name}` at line {}: corners ({xmin}, {ymin}, {xmax}, {ymax}) are not increasing",
                obj.line
            )));
        }
        let (w, h) = (width as f64, height as f64);
        let b = BoundingBox {
            class_id,
            xmin: (xmin - 1.0) / w,
            ymin: (ymin - 1.0) / h,
            xmax: xmax / w,
            ymax: ymax / h,
            difficult,
        };
        b.validate().map_err(|e| {
            DesError::Validation(format!("object `{name}` at line {}: {e}", obj.line))
        })?;
        boxes.push(b);
    }
    Ok(VocAnnotation { width, height, boxes })
}
