//! Plain-text wiring description of a traced forward pass.
//!
//! One line per labelled layer, in execution order:
//!
//! ```text
//! Kind name k s p in_ch out_ch in_WxH out_WxH input,input
//! ```
//!
//! Layers without a kernel print `-` for `k s p`; inputs with no labelled
//! ancestor print `-`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::config::NetConfig;
use crate::error::Result;
use crate::network::Network;
use crate::params::{Forward, Mode, ParamStore};
use crate::tape::{LayerKind, Tape};
use crate::tensor::{Scalar, Shape, Tensor};

/// Renders every labelled node of `tape`.
pub fn describe<T: Scalar>(tape: &Tape<T>) -> String {
    let mut out = String::new();
    for (v, label) in tape.labelled() {
        if label.kind == LayerKind::Input {
            let s = tape.shape(v);
            let _ = writeln!(out, "Input {} - - - - {} - {}x{} -", label.name, s.c, s.w, s.h);
            continue;
        }
        let os = tape.shape(v);
        let is = tape.primary_input_shape(v).unwrap_or(os);
        let geometry = match label.geometry {
            Some((k, s, p)) => alloc::format!("{k} {s} {p}"),
            None => String::from("- - -"),
        };
        let inputs: Vec<&str> = tape
            .labelled_inputs(v)
            .into_iter()
            .filter_map(|u| tape.label_of(u).map(|l| l.name.as_str()))
            .collect();
        let inputs = if inputs.is_empty() { String::from("-") } else { inputs.join(",") };
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}x{} {}x{} {}",
            label.kind.as_str(),
            label.name,
            geometry,
            is.c,
            os.c,
            is.w,
            is.h,
            os.w,
            os.h,
            inputs
        );
    }
    out
}

/// Traces the network for one `h`×`w` image pair without computing values.
pub fn wiring_dump(config: &NetConfig, h: usize, w: usize) -> Result<String> {
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(config.clone(), &mut store)?;
    let image = Tensor::zeros(Shape::new(1, 3, h, w));
    let mut fwd = Forward::new(&store, Mode::Trace);
    net.forward(&mut fwd, &image, &image)?;
    Ok(describe(&fwd.tape))
}
