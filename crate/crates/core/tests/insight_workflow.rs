mod common;

use std::time::Duration;

use common::{Canned, StubServer, COMPLETE_RESPONSE};
use koa_core::insight::{
    build_prompt, fallback_report, parse_insights, request_insights, EndpointConfig, InsightClient,
    InsightError, InsightSource, PromptTemplate,
};
use koa_core::report::{render_json, render_text, InsightBlock};
use koa_core::{KLGrade, PredictionResult};

fn g(v: u8) -> KLGrade {
    KLGrade::new(v).unwrap()
}

fn endpoint(url: &str) -> EndpointConfig {
    EndpointConfig {
        url: Some(url.to_string()),
        api_key: Some("test-key".into()),
        timeout: Duration::from_secs(5),
    }
}

fn ok(body: &str) -> Canned {
    Canned {
        status: 200,
        body: body.to_string(),
    }
}

#[test]
fn parser_fixtures() {
    let r = parse_insights(COMPLETE_RESPONSE, g(2)).unwrap();
    assert_eq!(r.symptoms, vec!["Pain after activity", "Morning stiffness"]);
    assert_eq!(r.source, InsightSource::Remote);

    let missing = COMPLETE_RESPONSE.replace("## AVOID\n- Deep squats\n", "");
    assert!(
        matches!(parse_insights(&missing, g(2)), Err(InsightError::MissingSection(s)) if s == "avoid")
    );

    let extra = format!("{COMPLETE_RESPONSE}## REFERENCES\n- some journal\n");
    assert_eq!(parse_insights(&extra, g(2)).unwrap(), r);
}

#[test]
fn request_posts_prompt_with_bearer_key() {
    let server = StubServer::start(vec![ok(COMPLETE_RESPONSE)]);
    let client = InsightClient::new(endpoint(&server.url), false);
    let report = client.report(g(3)).unwrap();
    assert_eq!(report.avoid, vec!["Deep squats"]);
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].0, "Bearer test-key");
    let body: serde_json::Value = serde_json::from_str(&reqs[0].1).unwrap();
    let prompt = body["prompt"].as_str().unwrap();
    assert_eq!(
        prompt,
        build_prompt(g(3), &PromptTemplate::default()).unwrap()
    );
    assert!(prompt.contains("Grade 3: moderate"));
}

#[test]
fn one_retry_on_server_error() {
    let server = StubServer::start(vec![
        Canned {
            status: 503,
            body: "busy".into(),
        },
        ok(COMPLETE_RESPONSE),
    ]);
    assert_eq!(
        request_insights("p", &endpoint(&server.url)).unwrap(),
        COMPLETE_RESPONSE
    );
    assert_eq!(server.connections(), 2);

    let down = StubServer::start(vec![Canned {
        status: 500,
        body: String::new(),
    }]);
    assert!(matches!(
        request_insights("p", &endpoint(&down.url)),
        Err(InsightError::HttpStatus(500))
    ));
    assert_eq!(down.connections(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(vec![Canned {
        status: 401,
        body: "no".into(),
    }]);
    assert!(matches!(
        request_insights("p", &endpoint(&server.url)),
        Err(InsightError::HttpStatus(401))
    ));
    assert_eq!(server.connections(), 1);
}

#[test]
fn unreachable_endpoint_is_a_network_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/x", listener.local_addr().unwrap());
    drop(listener);
    assert!(matches!(
        request_insights("p", &endpoint(&url)),
        Err(InsightError::NetworkError(_))
    ));
}

#[test]
fn offline_output_differs_only_in_insight_block() {
    let server = StubServer::start(vec![ok(COMPLETE_RESPONSE)]);
    let pred = PredictionResult::from_logits(&[0.1, 0.4, 2.0, -1.0, 0.3]).unwrap();

    let offline = InsightClient::new(endpoint(&server.url), true);
    let off_block = InsightBlock::Ok {
        report: offline.report(pred.grade).unwrap(),
    };
    assert_eq!(
        server.connections(),
        0,
        "offline mode must not touch the network"
    );

    let online = InsightClient::new(endpoint(&server.url), false);
    let on_block = InsightBlock::Ok {
        report: online.report(pred.grade).unwrap(),
    };
    assert_eq!(server.connections(), 1);

    let plain = render_text("knee.png", &pred, None);
    let off = render_text("knee.png", &pred, Some(&off_block));
    let on = render_text("knee.png", &pred, Some(&on_block));
    assert_eq!(&off[..plain.len()], plain);
    assert_eq!(&on[..plain.len()], plain);
    assert!(off.contains("source: fallback"));

    let strip = |s: &str| {
        let mut v: serde_json::Value = serde_json::from_str(s).unwrap();
        v.as_object_mut().unwrap().remove("insights");
        v
    };
    let jo = render_json("knee.png", &pred, Some(&off_block));
    let jn = render_json("knee.png", &pred, Some(&on_block));
    assert_eq!(strip(&jo), strip(&jn));
    assert_eq!(strip(&jo), strip(&render_json("knee.png", &pred, None)));
    let v: serde_json::Value = serde_json::from_str(&jo).unwrap();
    assert_eq!(v["insights"]["report"]["source"], "fallback");
    assert_eq!(
        fallback_report(pred.grade),
        offline.report(pred.grade).unwrap()
    );
}
