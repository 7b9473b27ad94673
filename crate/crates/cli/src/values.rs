//! Command-line value syntax for `pub`.

use scenebridge::codec::{ByteImage, SceneValue, Table, TypeTag};
use scenebridge::geometry::{Mat4, Quaternion, Vec3};
use serde_json::Value;

fn json(text: &str) -> Result<Value, String> {
    serde_json::from_str(text).map_err(|e| format!("not valid JSON: {e}"))
}

fn num(v: &Value) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("expected a number, got {v}"))
}

fn int(v: &Value) -> Result<i64, String> {
    v.as_i64().ok_or_else(|| format!("expected an integer, got {v}"))
}

fn list<'a>(v: &'a Value, what: &str) -> Result<&'a Vec<Value>, String> {
    v.as_array().ok_or_else(|| format!("expected {what} as a JSON array, got {v}"))
}

fn fixed<const N: usize>(v: &Value, what: &str) -> Result<[f64; N], String> {
    let items = list(v, what)?;
    if items.len() != N {
        return Err(format!("{what} needs {N} numbers, got {}", items.len()));
    }
    let mut out = [0.0; N];
    for (o, i) in out.iter_mut().zip(items) {
        *o = num(i)?;
    }
    Ok(out)
}

fn table<T: Copy>(v: &Value, cell: impl Fn(&Value) -> Result<T, String>) -> Result<Table<T>, String> {
    let rows = list(v, "table rows")?;
    let cols = rows.first().map_or(Ok(0), |r| list(r, "table row").map(Vec::len))?;
    let mut data = Vec::new();
    for r in rows {
        let r = list(r, "table row")?;
        if r.len() != cols {
            return Err("table rows differ in length".into());
        }
        for c in r {
            data.push(cell(c)?);
        }
    }
    Table::new(rows.len() as u32, cols as u32, data).map_err(|e| e.to_string())
}

/// `[16 row-major numbers]` or `{"position": [x,y,z], "orientation": [x,y,z,w]}`.
fn pose(v: &Value) -> Result<Mat4, String> {
    if v.is_array() {
        let m = Mat4(fixed::<16>(v, "matrix")?);
        if !m.is_rigid(1e-6) {
            return Err("matrix is not a rigid transform".into());
        }
        return Ok(m);
    }
    let p = fixed::<3>(v.get("position").ok_or("pose needs 'position'")?, "position")?;
    let q = match v.get("orientation") {
        Some(o) => {
            let q = fixed::<4>(o, "orientation")?;
            Quaternion::new(q[0], q[1], q[2], q[3]).map_err(|e| e.to_string())?
        }
        None => Quaternion::IDENTITY,
    };
    Mat4::from_pose(Vec3::from_array(p), q).map_err(|e| e.to_string())
}

fn strings(v: &Value, what: &str) -> Result<Vec<String>, String> {
    list(v, what)?
        .iter()
        .map(|s| s.as_str().map(str::to_string).ok_or_else(|| format!("{what} must be strings")))
        .collect()
}

/// Parses `text` into the scene value published for `tag`.
pub fn parse_value(tag: TypeTag, text: &str) -> Result<SceneValue, String> {
    Ok(match tag {
        TypeTag::String => SceneValue::String(text.to_string()),
        TypeTag::Bool => SceneValue::Bool(text.parse().map_err(|_| format!("'{text}' is not true or false"))?),
        TypeTag::Int => SceneValue::Int(text.trim().parse().map_err(|_| format!("'{text}' is not an integer"))?),
        TypeTag::Double => SceneValue::Double(text.trim().parse().map_err(|_| format!("'{text}' is not a number"))?),
        TypeTag::IntArray => SceneValue::IntArray(list(&json(text)?, "integers")?.iter().map(int).collect::<Result<_, _>>()?),
        TypeTag::DoubleArray => SceneValue::DoubleArray(list(&json(text)?, "numbers")?.iter().map(num).collect::<Result<_, _>>()?),
        TypeTag::IntTable => SceneValue::IntTable(table(&json(text)?, int)?),
        TypeTag::DoubleTable => SceneValue::DoubleTable(table(&json(text)?, num)?),
        TypeTag::PoseStamped => SceneValue::Matrix(pose(&json(text)?)?),
        TypeTag::WrenchStamped => SceneValue::DoubleArray(fixed::<6>(&json(text)?, "wrench")?.to_vec()),
        TypeTag::PoseArray => SceneValue::TransformCollection(list(&json(text)?, "poses")?.iter().map(pose).collect::<Result<_, _>>()?),
        TypeTag::PointCloud => SceneValue::PointSet(
            list(&json(text)?, "points")?
                .iter()
                .map(|p| fixed::<3>(p, "point").map(|a| [a[0] as f32, a[1] as f32, a[2] as f32]))
                .collect::<Result<_, _>>()?,
        ),
        TypeTag::JointState => {
            let v = json(text)?;
            SceneValue::JointPositions {
                names: strings(v.get("names").ok_or("joint state needs 'names'")?, "names")?,
                positions: list(v.get("positions").ok_or("joint state needs 'positions'")?, "positions")?
                    .iter()
                    .map(num)
                    .collect::<Result<_, _>>()?,
            }
        }
        TypeTag::TfTransform => {
            let v = json(text)?;
            let field = |k: &str| {
                v.get(k)
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| format!("transform needs string '{k}'"))
            };
            SceneValue::FrameTransform {
                parent_frame: field("parent")?,
                child_frame: field("child")?,
                matrix: pose(&v)?,
            }
        }
        TypeTag::UInt8Image => {
            let v = json(text)?;
            let dim = |k: &str| v.get(k).and_then(Value::as_u64).ok_or_else(|| format!("image needs integer '{k}'"));
            let (width, height) = (dim("width")? as u32, dim("height")? as u32);
            let encoding = v.get("encoding").and_then(Value::as_str).unwrap_or("mono8").to_string();
            let channels = scenebridge::codec::encoding_channels(&encoding).ok_or_else(|| format!("unknown encoding '{encoding}'"))?;
            let data = list(v.get("data").ok_or("image needs 'data'")?, "data")?
                .iter()
                .map(|b| b.as_u64().filter(|b| *b < 256).map(|b| b as u8).ok_or_else(|| format!("{b} is not a byte")))
                .collect::<Result<Vec<u8>, _>>()?;
            SceneValue::ByteImage(ByteImage {
                height,
                width,
                encoding,
                step: width * channels,
                data,
            })
        }
    })
}
