//! The viewer bundle as an external JSON interface: key names, nesting and
//! value types a browser client relies on.

use ctxprobe_core::backends::ngram_train;
use ctxprobe_core::export::{
    emit_bundle, export_viewer_bundle, parse_bundle, BundleManifest, ExportConfig, ExportError,
};
use ctxprobe_core::scheduler::BackendSummary;
use ctxprobe_core::{compute_series, run_probe, LanguageModel, ProbeConfig, StoreDtype, TokenizedDocument, Vocab};
use serde_json::Value;

fn bundle_json(c_max: usize) -> String {
    let vocab = Vocab::new(["<unk>", "a", "b", "c", "d"].map(String::from).to_vec()).unwrap();
    let ids: Vec<u32> = (0..150u32).map(|i| 1 + (i * i + i / 5) % 4).collect();
    let model = ngram_train(std::slice::from_ref(&ids), vocab.clone(), 2, 0.5).unwrap();
    let mut doc = TokenizedDocument::new("d", ids);
    doc.pos_tags = Some(vec!["X".to_string(); 150]);
    let config = ProbeConfig {
        c_max,
        store_dtype: StoreDtype::F16,
        top_k_export: 3,
        ..Default::default()
    };
    let store = run_probe(&model, &doc, &config).unwrap();
    let series = compute_series(&store, &doc).unwrap();
    let manifest = BundleManifest {
        backend: BackendSummary {
            name: model.descriptor().name.clone(),
            vocab_size: vocab.size(),
            max_segment_len: model.descriptor().max_segment_len,
        },
        config: config.clone(),
    };
    let b = export_viewer_bundle(&doc, &series, &store, &vocab, manifest, ExportConfig::from(&config)).unwrap();
    emit_bundle(&b).unwrap()
}

fn keys(v: &Value) -> Vec<&str> {
    let mut k: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    k.sort();
    k
}

#[test]
fn layout() {
    let v: Value = serde_json::from_str(&bundle_json(100)).unwrap();
    assert_eq!(keys(&v), ["doc", "manifest", "schema_version", "targets"]);
    assert_eq!(v["schema_version"], "1.0");
    assert_eq!(
        keys(&v["doc"]),
        ["doc_id", "pos_tags", "spans", "text", "token_ids", "tokens"]
    );
    assert_eq!(keys(&v["manifest"]), ["backend", "config"]);
    assert_eq!(v["manifest"]["config"]["store_dtype"], "f16");

    let targets = v["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 149);
    let t = &targets[119];
    assert_eq!(
        keys(t),
        [
            "c_eff",
            "delta_kl",
            "delta_nll",
            "kl",
            "n",
            "nll",
            "retained_c",
            "target",
            "top_k"
        ]
    );
    assert_eq!(t["n"], 120);
    assert_eq!(t["c_eff"], 100);
    let retained: Vec<u64> = t["retained_c"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!(&retained[..64], (1..=64).collect::<Vec<u64>>().as_slice());
    assert_eq!(*retained.last().unwrap(), 100);
    assert_eq!(t["nll"].as_array().unwrap().len(), retained.len());
    assert_eq!(t["top_k"].as_array().unwrap().len(), retained.len());
    let first = &t["top_k"][0];
    assert_eq!(first.as_array().unwrap().len(), 3);
    assert_eq!(keys(&first[0]), ["prob", "token_id"]);
    let d = &t["delta_kl"][0];
    assert_eq!(keys(d), ["m", "score"]);
    // scored positions run from the first token in the window to n - 2
    let ms: Vec<u64> = t["delta_kl"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["m"].as_u64().unwrap())
        .collect();
    assert_eq!(ms, (21..=119).collect::<Vec<u64>>());
}

#[test]
fn viewer_side_rejections() {
    let json = bundle_json(8);
    assert!(parse_bundle(&json).is_ok());
    let mut v: Value = serde_json::from_str(&json).unwrap();
    v["schema_version"] = "2.0".into();
    assert!(matches!(
        parse_bundle(&v.to_string()),
        Err(ExportError::UnsupportedSchema(_))
    ));

    let mut v: Value = serde_json::from_str(&json).unwrap();
    v["targets"][3]["top_k"][0][0]["prob"] = 0.0.into();
    assert!(matches!(parse_bundle(&v.to_string()), Err(ExportError::Invalid(_))));

    let mut v: Value = serde_json::from_str(&json).unwrap();
    v["targets"][3]["delta_kl"][0]["m"] = 4.into();
    assert!(matches!(parse_bundle(&v.to_string()), Err(ExportError::Invalid(_))));

    assert!(matches!(
        parse_bundle("{\"schema_version\": \"1.0\"}"),
        Err(ExportError::Json(_))
    ));
}
