use dcp_nas::autodiff::Graph;
use dcp_nas::config::RunConfig;
use dcp_nas::data::{load_dataset, parse_idx, write_idx, Dataset};
use dcp_nas::supernet::{accuracy, one_hot};
use dcp_nas::{Error, Tensor};

/// Per-channel means: the blobs differ only in their channel centres.
fn features(d: &Dataset) -> Tensor {
    let (n, c, h, w) = d.images.nchw().unwrap();
    let px = h * w;
    let data = d.images.data();
    let f = (0..n * c).map(|i| data[i * px..(i + 1) * px].iter().sum::<f64>() / px as f64).collect();
    Tensor::new(vec![n, c], f).unwrap()
}

#[test]
fn linear_probe_separates_the_blobs() {
    let cfg = RunConfig::desk();
    let splits = load_dataset(&cfg.data, 7).unwrap();
    let (x, y) = (features(&splits.search_train), one_hot(&splits.search_train.labels, 2).unwrap());
    let (mut w, mut b) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2]));
    for _ in 0..200 {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.param(w.clone()), g.param(b.clone()));
        let z = g.linear(xv, wv, bv).unwrap();
        let loss = g.cross_entropy(z, &y).unwrap();
        let grads = g.backward(loss).unwrap();
        w = w.zip_map(grads.wrt(wv), |a, d| a - 0.5 * d).unwrap();
        b = b.zip_map(grads.wrt(bv), |a, d| a - 0.5 * d).unwrap();
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(features(&splits.test)), g.constant(w), g.constant(b));
    let z = g.linear(xv, wv, bv).unwrap();
    let acc = accuracy(g.value(z), &splits.test.labels);
    assert!(acc >= 0.99, "linear probe accuracy {acc}");
}

#[test]
fn idx_errors_carry_byte_offsets() {
    let good = write_idx(0x0000_0803, &[1, 2, 2], &[0, 1, 2, 3]);
    assert!(parse_idx(&good, 0x0000_0803).is_ok());
    let mut bad = good.clone();
    bad[2] = 0x09;
    match parse_idx(&bad, 0x0000_0803) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
