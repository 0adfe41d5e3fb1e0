use skinnet::datasets::{
    class_allocation, gen_synthetic, synth_sample, Label, Manifest, Split, SynthSpec, DEFAULT_CLASS_MIX,
};

fn spec(seed: u64) -> SynthSpec {
    SynthSpec { seed, train: 12, val: 4, test: 2, size: 48, ..SynthSpec::default() }
}

#[test]
fn generator_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = gen_synthetic(&spec(4), a.path()).unwrap();
    let mb = gen_synthetic(&spec(4), b.path()).unwrap();
    gen_synthetic(&spec(5), c.path()).unwrap();
    assert_eq!(ma.to_text(), mb.to_text());
    let mut differs = false;
    for rec in ma.records() {
        let bytes = |dir: &std::path::Path| std::fs::read(dir.join(&rec.image)).unwrap();
        assert_eq!(bytes(a.path()), bytes(b.path()));
        differs |= bytes(a.path()) != bytes(c.path());
    }
    assert!(differs);
}

#[test]
fn written_masks_equal_the_analytic_shape() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_synthetic(&spec(9), dir.path()).unwrap();
    let reloaded = Manifest::load(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reloaded.records(), m.records());
    for rec in reloaded.records() {
        let mask = reloaded.load_mask(rec).unwrap().unwrap();
        let img = reloaded.load_image(rec).unwrap();
        assert_eq!((mask.height(), mask.width()), (img.height(), img.width()));
        assert!(!mask.is_empty());
    }
    let s = synth_sample(9, 0, Label::Melanoma, 48);
    assert_eq!(s.mask, s.shape.render(48, 48));
}

#[test]
fn class_counts_follow_the_mix_within_one() {
    for n in [1usize, 7, 40, 200, 301] {
        let counts = class_allocation(n, DEFAULT_CLASS_MIX);
        assert_eq!(counts.iter().sum::<usize>(), n);
        let total: f64 = DEFAULT_CLASS_MIX.iter().sum();
        for k in 0..3 {
            let ideal = n as f64 * DEFAULT_CLASS_MIX[k] / total;
            assert!((counts[k] as f64 - ideal).abs() <= 1.0, "n={n} k={k}");
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let m = gen_synthetic(&SynthSpec { train: 40, val: 0, test: 0, size: 32, ..spec(1) }, dir.path()).unwrap();
    assert_eq!(m.class_counts(Split::Train), class_allocation(40, DEFAULT_CLASS_MIX));
}

#[test]
fn manifest_text_round_trips_and_rejects_unknown_fields() {
    let text = "{\"image\":\"a.png\",\"mask\":\"a_m.png\",\"label\":\"nevus\",\"split\":\"train\"}\n\
                {\"image\":\"b.png\",\"mask\":null,\"label\":null,\"split\":\"test\"}\n";
    let m = Manifest::parse(text, "/data").unwrap();
    assert_eq!(m.records().len(), 2);
    assert_eq!(m.records()[0].label, Some(Label::Nevus));
    assert_eq!(Manifest::parse(&m.to_text(), "/data").unwrap(), m);
    assert!(Manifest::parse("{\"image\":\"a.png\",\"split\":\"train\",\"extra\":1}\n", "/").is_err());
    let err = Manifest::parse("{\"image\":\"a.png\",\"split\":\"train\"}\nnot json\n", "/").unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}
